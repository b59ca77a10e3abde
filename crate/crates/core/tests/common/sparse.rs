//! Diagnosis of a toy disturbance next to the exhaustive-support oracle.

use gridfreq_core::{
    balance_base_case, build_droop_curves, diagnose, solve_gpf, DiagConfig, DiagnosisResult,
    DroopOptions, GenId, NetworkCase, SolverConfig,
};

use super::oracle::{droop_at, Oracle};
use super::reference_ybus;
use super::toys::{Toy, ToyEvent};

pub struct Checked {
    pub oracle_min: usize,
    pub diagnosed: Vec<usize>,
    pub tied: bool,
}

/// Diagnose `toy` with bounds at half its unconstrained deviation and compare
/// against the oracle. `None` when the toy does not produce a usable
/// violation.
pub fn check_toy(toy: &Toy) -> Option<(Checked, DiagnosisResult, NetworkCase, f64)> {
    let cfg = SolverConfig::default();
    let base = balance_base_case(&NetworkCase::from_text(&toy.text).ok()?, &cfg).ok()?;
    let post = match toy.event {
        ToyEvent::Trip(g) => base.apply_contingency(GenId(g)).ok()?,
        ToyEvent::LoadStep { bus, mw } => base.apply_load_step(bus, mw, 0.0).ok()?,
    };
    let curves = build_droop_curves(&post, &DroopOptions::default()).ok()?;
    let gpf = solve_gpf(&post, &curves, &cfg).ok()?;
    if !gpf.converged || gpf.df > -0.01 {
        return None;
    }
    let lo = 0.5 * gpf.df;
    let diag = diagnose(&post, &curves, &DiagConfig::default().with_bounds(lo, -lo)).ok()?;
    let oracle = Oracle::new(&post, reference_ybus(&toy.text).1, &droop_at(&curves, lo));
    let volts = gpf.state.voltages();
    let (k, sets) = oracle.minimum_supports(Some(&volts));
    let mut diagnosed: Vec<usize> = diag
        .support
        .iter()
        .map(|e| post.bus_index(e.bus).unwrap())
        .collect();
    diagnosed.sort_unstable();
    let tied = sets.contains(&diagnosed);
    Some((
        Checked {
            oracle_min: k,
            diagnosed,
            tied,
        },
        diag,
        post,
        lo,
    ))
}
