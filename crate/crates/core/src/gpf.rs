//! Governor power flow and the classical power flow used to balance the
//! pre-disturbance case.
//!
//! The governor power flow minimises `½‖n‖²` subject to the KCL rows with a
//! compensation current at every bus, the droop coupling of every unit and the
//! voltage/angle rows. On a survivable system the optimum has `n = 0` and the
//! state is the ordinary droop power-flow solution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case_io::NetworkCase;
use crate::droop::{total_gain, DroopCurve};
use crate::kkt::{EngineError, Iterate, Penalty, Problem, StepRules};
use crate::linalg::{LinalgError, SparseSystem};
use crate::network::{
    build_admittance, CompensationVector, Formulation, Layout, ModelError, NetworkModel,
    SystemState,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Residual tolerance, p.u.
    pub tol_residual: f64,
    pub max_iters: usize,
    /// Extra step scaling applied whenever a step limit binds.
    pub damping_factor: f64,
    /// Largest change of any voltage component per Newton step, p.u.
    pub v_step_limit: f64,
    /// Largest change of Δf per Newton step, Hz.
    pub df_step_limit: f64,
    /// Start from a flat profile instead of the voltages listed in the case.
    pub flat_start: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol_residual: 1e-6,
            max_iters: 200,
            damping_factor: 0.7,
            v_step_limit: 0.1,
            df_step_limit: 0.1,
            flat_start: false,
        }
    }
}

impl SolverConfig {
    pub(crate) fn steps(&self) -> StepRules {
        StepRules {
            v_step_limit: self.v_step_limit,
            df_step_limit: self.df_step_limit,
            damping_factor: self.damping_factor,
        }
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        let ok = self.tol_residual > 0.0
            && self.max_iters > 0
            && self.damping_factor > 0.0
            && self.damping_factor <= 1.0
            && self.v_step_limit > 0.0
            && self.df_step_limit > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SolveError::Config(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("singular Newton system at {what}")]
    Singular { row: usize, what: String },
    #[error("linear solver failure: {0}")]
    Linalg(LinalgError),
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("aggregate droop gain of the remaining units is zero")]
    ZeroGain,
    #[error("power flow did not converge in {iterations} iterations (residual {residual:.3e})")]
    PowerFlowDiverged { iterations: usize, residual: f64 },
}

pub(crate) fn describe_kkt_row(net: &NetworkCase, layout: &Layout, row: usize) -> String {
    let nx = layout.n_unknowns();
    if row < nx {
        format!("stationarity in {}", layout.describe_unknown(net, row))
    } else {
        layout.describe_row(net, row - nx)
    }
}

pub(crate) fn engine_error(net: &NetworkCase, layout: &Layout, e: EngineError) -> SolveError {
    match e {
        EngineError::Model(m) => SolveError::Model(m),
        EngineError::Singular { row } => SolveError::Singular {
            row,
            what: describe_kkt_row(net, layout, row),
        },
        EngineError::Linalg(l) => SolveError::Linalg(l),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GpfSolution {
    pub state: SystemState,
    pub n: CompensationVector,
    pub converged: bool,
    pub iterations: usize,
    /// Final optimality residual, p.u.
    pub residual: f64,
    /// ½‖n‖², p.u.²
    pub objective: f64,
    /// Frequency deviation, Hz.
    pub df: f64,
    /// Multipliers of every constraint row at the solution.
    #[serde(skip)]
    pub multipliers: Vec<f64>,
}

/// Solution of the classical power flow.
#[derive(Debug, Clone, PartialEq)]
pub struct PfSolution {
    pub state: SystemState,
    pub layout: Layout,
    pub iterations: usize,
    pub residual: f64,
}

/// Plain Newton on `residual(x) = 0` with the step limiting rules.
pub fn solve_constraints(
    model: &NetworkModel<'_>,
    start: &SystemState,
    cfg: &SolverConfig,
    tol: f64,
) -> Result<(SystemState, usize, f64), SolveError> {
    let layout = &model.layout;
    let mut x = start.pack(layout);
    let mut r = model.residual(&x, &[])?;
    let mut norm = inf(&r);
    let mut sys: Option<SparseSystem> = None;
    let mut iters = 0;
    while norm >= tol {
        if iters >= cfg.max_iters {
            return Err(SolveError::PowerFlowDiverged {
                iterations: iters,
                residual: norm,
            });
        }
        iters += 1;
        let j = model.jacobian(&x)?;
        match &mut sys {
            Some(s) => s.update(&j).map_err(|e| linalg_error(model, e))?,
            None => {
                sys = Some(
                    SparseSystem::assemble(layout.n_unknowns(), &j)
                        .map_err(|e| linalg_error(model, e))?,
                )
            }
        }
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let dx = sys
            .as_mut()
            .expect("assembled")
            .factor_and_solve(&rhs)
            .map_err(|e| linalg_error(model, e))?;
        let mut alpha = step_scale(layout, &dx, cfg);
        loop {
            let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + alpha * d).collect();
            match model.residual(&trial, &[]) {
                Ok(rt) if rt.iter().all(|v| v.is_finite()) => {
                    x = trial;
                    r = rt;
                    break;
                }
                Ok(_) | Err(ModelError::SingularInjection { .. }) if alpha > 1e-6 => alpha *= 0.5,
                Ok(_) => {
                    return Err(SolveError::PowerFlowDiverged {
                        iterations: iters,
                        residual: f64::INFINITY,
                    })
                }
                Err(e) => return Err(e.into()),
            }
        }
        norm = inf(&r);
    }
    Ok((SystemState::unpack(layout, &x), iters, norm))
}

fn linalg_error(model: &NetworkModel<'_>, e: LinalgError) -> SolveError {
    match e {
        LinalgError::SingularPivot { row } => SolveError::Singular {
            row,
            what: model.layout.describe_row(model.net, row),
        },
        other => SolveError::Linalg(other),
    }
}

/// Newton step scale from the voltage and frequency step limits.
pub(crate) fn step_scale(layout: &Layout, dx: &[f64], cfg: &SolverConfig) -> f64 {
    let dv = (0..layout.n_bus)
        .map(|i| dx[layout.vr(i)].abs().max(dx[layout.vi(i)].abs()))
        .fold(0.0, f64::max);
    let mut alpha: f64 = 1.0;
    if dv > cfg.v_step_limit {
        alpha = alpha.min(cfg.v_step_limit / dv);
    }
    if let Some(f) = layout.df() {
        if dx[f].abs() > cfg.df_step_limit {
            alpha = alpha.min(cfg.df_step_limit / dx[f].abs());
        }
    }
    if alpha < 1.0 {
        alpha *= cfg.damping_factor;
    }
    alpha
}

fn start_state(net: &NetworkCase, layout: &Layout, cfg: &SolverConfig) -> SystemState {
    if cfg.flat_start {
        SystemState::flat(net, layout)
    } else {
        SystemState::from_case(net, layout)
    }
}

/// Classical power flow with the slack bus absorbing the active imbalance.
pub fn solve_pf(net: &NetworkCase, cfg: &SolverConfig) -> Result<PfSolution, SolveError> {
    cfg.validate()?;
    let y = build_admittance(net);
    let model = NetworkModel::new(net, &y, Formulation::PowerFlow, &[])?;
    let start = start_state(net, &model.layout, cfg);
    // solve well below the tolerance: the result seeds the balanced base case
    let tol = cfg.tol_residual.min(1e-11);
    let (state, iterations, residual) = match solve_constraints(&model, &start, cfg, tol) {
        Ok(s) => s,
        Err(SolveError::PowerFlowDiverged { .. }) if !cfg.flat_start => {
            let flat = SystemState::flat(net, &model.layout);
            solve_constraints(&model, &flat, cfg, tol)?
        }
        Err(e) => return Err(e),
    };
    Ok(PfSolution {
        state,
        layout: model.layout.clone(),
        iterations,
        residual,
    })
}

/// Write a power-flow solution back into the case: bus voltages become the
/// listed profile, the slack-bus units take up the solved active output and
/// regulating units their share of reactive output. The returned case has
/// zero frequency deviation under the governor power flow.
pub fn balance_base_case(net: &NetworkCase, cfg: &SolverConfig) -> Result<NetworkCase, SolveError> {
    let pf = solve_pf(net, cfg)?;
    let mut out = net.clone();
    for (i, b) in out.buses.iter_mut().enumerate() {
        let v = pf.state.voltage(i);
        b.vm = v.norm();
        b.va = v.arg();
    }
    let qg = pf.state.gen_q(net, &pf.layout);
    for (g, q) in out.gens.iter_mut().zip(qg) {
        g.qg = q;
    }
    let slack_units: Vec<usize> = (0..out.gens.len())
        .filter(|&j| out.gens[j].bus == out.slack)
        .collect();
    let listed: f64 = slack_units.iter().map(|&j| out.gens[j].pg).sum();
    let correction = pf.state.dp[0] - listed;
    let share = correction / slack_units.len() as f64;
    for j in slack_units {
        out.gens[j].pg += share;
    }
    Ok(out)
}

/// Governor power flow from the case's voltage profile (or flat start).
pub fn solve_gpf(
    net: &NetworkCase,
    curves: &[DroopCurve],
    cfg: &SolverConfig,
) -> Result<GpfSolution, SolveError> {
    let layout = Layout::new(net, Formulation::Governor)?;
    let start = start_state(net, &layout, cfg);
    solve_gpf_from(net, curves, cfg, &start)
}

/// Governor power flow from a given starting state.
pub fn solve_gpf_from(
    net: &NetworkCase,
    curves: &[DroopCurve],
    cfg: &SolverConfig,
    start: &SystemState,
) -> Result<GpfSolution, SolveError> {
    cfg.validate()?;
    if !(total_gain(curves) > 0.0) {
        return Err(SolveError::ZeroGain);
    }
    let y = build_admittance(net);
    let model = NetworkModel::new(net, &y, Formulation::Governor, curves)?;
    let layout = model.layout.clone();
    let problem = Problem {
        model: &model,
        penalty: vec![Penalty::Dense; 2 * net.n_bus()],
        bounds: None,
        steps: cfg.steps(),
        tol: cfg.tol_residual,
        max_iters: cfg.max_iters,
        sigma: 0.1,
    };
    let mut it = Iterate::new(
        start.pack(&layout),
        layout.n_rows(),
        vec![0.0; 2 * net.n_bus()],
    );
    it.center(&problem, 0.0);
    let mut sys = None;
    let out = problem
        .solve(&mut it, 0.0, &mut sys)
        .map_err(|e| engine_error(net, &layout, e))?;
    let state = SystemState::unpack(&layout, &it.x);
    let n = CompensationVector::from_interleaved(&it.n);
    Ok(GpfSolution {
        df: state.df,
        objective: 0.5 * n.l2_sq(),
        state,
        n,
        converged: out.converged,
        iterations: out.iterations,
        residual: out.residual,
        multipliers: it.lam,
    })
}

/// Frequency deviation predicted by aggregate linear droop, Hz.
pub fn predict_df_smallsignal(curves: &[DroopCurve], dp_lost: f64) -> Result<f64, SolveError> {
    let k = total_gain(curves);
    if !(k > 0.0) {
        return Err(SolveError::ZeroGain);
    }
    Ok(-dp_lost / k)
}

fn inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
