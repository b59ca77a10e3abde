//! Steady-state frequency-aware grid diagnosis.
//!
//! The crate solves the governor power flow of a transmission network (bus
//! voltages together with the droop response of every generator and the
//! resulting steady-state frequency deviation) and, when the post-disturbance
//! system is infeasible or its frequency deviation leaves a user-defined band,
//! locates a sparse set of bus current compensations that restores both power
//! balance and frequency.
//!
//! Pipeline:
//!
//! 1. [`case_io`] parses MATPOWER `.m` case text into a per-unit [`NetworkCase`].
//! 2. [`droop`] builds the smoothed five-region droop curve of every unit.
//! 3. [`network`] evaluates the rectangular current-mismatch equations, their
//!    Jacobian and the Lagrangian Hessian.
//! 4. [`gpf`] solves the dense compensation problem (governor power flow).
//! 5. [`sparse_diag`] runs the interior-point weighted-L1 problem with
//!    frequency bounds inside the outer sparsity-weight loop.
//! 6. [`contingency`] sweeps N-1 generator outages and [`report`] writes the
//!    results as JSON/CSV.

// `!(x > 0.0)` is deliberate (it also rejects NaN); index loops mirror the
// sparse-storage and KKT row layouts
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod case_io;
pub mod contingency;
pub mod droop;
pub mod gpf;
mod kkt;
pub mod linalg;
pub mod network;
pub mod report;
pub mod sparse_diag;

pub use case_io::{parse_case, BusKind, CaseError, GenId, NetworkCase, RawCase};
pub use contingency::{enumerate_outages, run_study, StudyReport, StudyRow, StudySpec};
pub use droop::{build_droop_curves, DroopCurve, DroopOptions, RatingBase};
pub use gpf::{balance_base_case, solve_gpf, GpfSolution, SolveError, SolverConfig};
pub use network::{CompensationVector, SystemState};
pub use report::{emit_report, Format, Report};
pub use sparse_diag::{diagnose, DiagConfig, DiagnosisResult, Verdict};
