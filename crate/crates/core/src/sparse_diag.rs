//! Sparse, frequency-bounded compensation (weighted L1 plus L2) and the
//! outer loop that concentrates the compensation on few buses.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::case_io::NetworkCase;
use crate::droop::DroopCurve;
use crate::gpf::{engine_error, solve_gpf, GpfSolution, SolveError, SolverConfig};
use crate::kkt::{Iterate, Penalty, Problem};
use crate::network::{
    build_admittance, CompensationVector, Formulation, NetworkModel, SplitParts, SystemState,
    DEFAULT_SUPPORT_THRESHOLD,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagConfig {
    /// Frequency band `(Δf_min, Δf_max)`, Hz.
    pub bounds: (f64, f64),
    pub solver: SolverConfig,
    pub c_low: f64,
    pub c_high: f64,
    /// Compensation above this (p.u. current, per component) counts as support.
    pub support_threshold: f64,
    pub max_outer: usize,
    /// Initial barrier parameter of a cold start.
    pub mu0: f64,
    /// Initial barrier parameter of a warm-started subproblem.
    pub mu0_warm: f64,
    pub sigma: f64,
    /// Share of the current support that keeps the low weight in the next
    /// subproblem, ranked by compensation size. `1.0` keeps the whole support.
    pub keep_fraction: f64,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self {
            bounds: (-0.06, 0.06),
            solver: SolverConfig::default(),
            c_low: 0.1,
            c_high: 10.0,
            support_threshold: DEFAULT_SUPPORT_THRESHOLD,
            max_outer: 12,
            mu0: 0.1,
            mu0_warm: 1e-2,
            sigma: 0.1,
            keep_fraction: 0.25,
        }
    }
}

impl DiagConfig {
    pub fn with_bounds(mut self, lo: f64, hi: f64) -> Self {
        self.bounds = (lo, hi);
        self
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        self.solver.validate()?;
        let (lo, hi) = self.bounds;
        let ok = lo < 0.0
            && hi > 0.0
            && self.c_low > 0.0
            && self.c_high > 0.0
            && self.support_threshold > 0.0
            && self.max_outer > 0
            && self.mu0 > 0.0
            && self.mu0_warm > 0.0
            && self.sigma > 0.0
            && self.sigma < 1.0
            && self.keep_fraction > 0.0
            && self.keep_fraction <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(SolveError::Config(format!("{self:?}")))
        }
    }
}

/// Per-bus L1 weights. Both KCL components of a bus share the bus weight.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityWeights {
    pub c: Vec<f64>,
    pub c_low: f64,
    pub c_high: f64,
    /// Number of weights changed by each update.
    pub history: Vec<usize>,
}

impl SparsityWeights {
    pub fn uniform(n_bus: usize, c: f64, c_low: f64, c_high: f64) -> Self {
        Self {
            c: vec![c; n_bus],
            c_low,
            c_high,
            history: Vec::new(),
        }
    }

    fn penalties(&self) -> Vec<Penalty> {
        self.c
            .iter()
            .flat_map(|&c| {
                let p = if c > 0.0 {
                    Penalty::Split(c)
                } else {
                    Penalty::Dense
                };
                [p, p]
            })
            .collect()
    }
}

/// Give `c_low` to the largest `⌈keep_fraction·|S|⌉` members of the support `S`
/// (ties at the cut are kept) and `c_high` to every other bus. Returns the
/// new weights and the number of buses whose weight changed.
pub fn update_sparsity_weights(
    weights: &SparsityWeights,
    n: &CompensationVector,
    keep_fraction: f64,
) -> (SparsityWeights, usize) {
    let support = n.support();
    let mut keep = vec![false; n.len()];
    if !support.is_empty() {
        let mut mags: Vec<f64> = support.iter().map(|&i| n.component_max(i)).collect();
        mags.sort_by(|a, b| b.total_cmp(a));
        let k = ((keep_fraction * support.len() as f64).ceil() as usize).clamp(1, support.len());
        let cut = mags[k - 1];
        for &i in &support {
            if n.component_max(i) >= cut {
                keep[i] = true;
            }
        }
    }
    let mut out = weights.clone();
    let mut changed = 0;
    for (i, c) in out.c.iter_mut().enumerate() {
        let new = if keep[i] {
            weights.c_low
        } else {
            weights.c_high
        };
        if *c != new {
            changed += 1;
        }
        *c = new;
    }
    out.history.push(changed);
    (out, changed)
}

/// Barrier quantities of a sparse solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BarrierState {
    pub mu: f64,
    pub sigma: f64,
    /// Multipliers of every equality row.
    pub multipliers: Vec<f64>,
    pub s_upper: f64,
    pub s_lower: f64,
    pub z_upper: f64,
    pub z_lower: f64,
    /// Duals of the split parts, interleaved like the KCL rows.
    pub z_pos: Vec<f64>,
    pub z_neg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseSolution {
    pub state: SystemState,
    pub n: CompensationVector,
    pub barrier: BarrierState,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    /// True objective `½‖n‖² + Σ c_i(|n_re,i| + |n_im,i|)` after each barrier level.
    pub objective_history: Vec<f64>,
    iterate: Iterate,
}

impl SparseSolution {
    pub fn objective(&self, weights: &SparsityWeights) -> f64 {
        0.5 * self.n.l2_sq() + self.n.weighted_l1(&weights.c)
    }
}

/// Starting point of a sparse solve.
pub enum SparseInit<'a> {
    /// First subproblem: start from the governor power flow.
    Gpf(&'a GpfSolution),
    /// Later subproblems: start from the previous solution.
    Warm(&'a SparseSolution),
}

/// Solve the frequency-bounded weighted problem once.
pub fn solve_sparse(
    net: &NetworkCase,
    curves: &[DroopCurve],
    weights: &SparsityWeights,
    init: SparseInit<'_>,
    cfg: &DiagConfig,
) -> Result<SparseSolution, SolveError> {
    let y = build_admittance(net);
    let model = NetworkModel::new(net, &y, Formulation::Governor, curves)?;
    let penalty = weights.penalties();
    let problem = Problem {
        model: &model,
        penalty,
        bounds: Some(cfg.bounds),
        steps: cfg.solver.steps(),
        tol: cfg.solver.tol_residual,
        max_iters: cfg.solver.max_iters,
        sigma: cfg.sigma,
    };
    let (x0, lam0, mu0) = match &init {
        SparseInit::Gpf(g) => (g.state.pack(&model.layout), g.multipliers.clone(), cfg.mu0),
        SparseInit::Warm(s) => (s.iterate.x.clone(), s.iterate.lam.clone(), cfg.mu0_warm),
    };
    let start = interior_start(&problem, x0, lam0, mu0)?;
    let attempt = |mu0: f64| -> Result<(Iterate, crate::kkt::Outcome), SolveError> {
        let mut it = start.clone();
        it.center(&problem, mu0);
        let mut sys = None;
        let out = problem
            .solve(&mut it, mu0, &mut sys)
            .map_err(|e| engine_error(net, &model.layout, e))?;
        Ok((it, out))
    };
    // one reset to the cold barrier level if the first attempt fails
    let (it, out) = match attempt(mu0) {
        Ok((it, out)) if out.converged => (it, out),
        first => match attempt(cfg.mu0.max(mu0)) {
            Ok(r) => r,
            Err(e) => match first {
                Ok(r) => r,
                Err(_) => return Err(e),
            },
        },
    };
    Ok(package(&problem, it, out, cfg))
}

/// Move Δf strictly inside the band, set every droop adjustment on its curve
/// and let `n` absorb the resulting KCL mismatch.
fn interior_start(
    problem: &Problem<'_, '_>,
    mut x: Vec<f64>,
    lam: Vec<f64>,
    _mu: f64,
) -> Result<Iterate, SolveError> {
    let model = problem.model;
    let l = &model.layout;
    let (lo, hi) = problem.bounds.expect("bounded problem");
    let margin = 0.1 * (hi - lo);
    let f = l.df().expect("governor layout");
    x[f] = x[f].clamp(lo + margin, hi - margin);
    for (j, c) in model.curves().iter().enumerate() {
        x[l.p(j)] = c.eval(x[f]);
    }
    let r = model.residual(&x, &[])?;
    let n: Vec<f64> = r[..2 * l.n_bus].iter().map(|v| -v).collect();
    let mut it = Iterate::new(x, l.n_rows(), n);
    it.lam = lam;
    Ok(it)
}

fn package(
    problem: &Problem<'_, '_>,
    it: Iterate,
    out: crate::kkt::Outcome,
    cfg: &DiagConfig,
) -> SparseSolution {
    let l = &problem.model.layout;
    let state = SystemState::unpack(l, &it.x);
    let mut n = CompensationVector::from_interleaved(&it.n);
    n.support_threshold = cfg.support_threshold;
    let pick =
        |v: &[f64], off: usize| -> Vec<f64> { v.iter().skip(off).step_by(2).copied().collect() };
    n.split = Some(SplitParts {
        re_pos: pick(&it.a, 0),
        re_neg: pick(&it.b, 0),
        im_pos: pick(&it.a, 1),
        im_neg: pick(&it.b, 1),
    });
    let (lo, hi) = cfg.bounds;
    let barrier = BarrierState {
        mu: out.mu,
        sigma: cfg.sigma,
        multipliers: it.lam.clone(),
        s_upper: hi - state.df,
        s_lower: state.df - lo,
        z_upper: it.z_up,
        z_lower: it.z_lo,
        z_pos: it.za.clone(),
        z_neg: it.zb.clone(),
    };
    SparseSolution {
        state,
        n,
        barrier,
        converged: out.converged,
        iterations: out.iterations,
        residual: out.residual,
        objective_history: out.objective_history,
        iterate: it,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Stable,
    UnstableRecovered,
    CollapsedRecovered,
    Nonconverged,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Stable => "stable",
            Verdict::UnstableRecovered => "unstable-recovered",
            Verdict::CollapsedRecovered => "collapsed-recovered",
            Verdict::Nonconverged => "nonconverged",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportEntry {
    /// External bus id.
    pub bus: i64,
    pub n_mag_pu: f64,
    pub n_re_pu: f64,
    pub n_im_pu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosisResult {
    pub verdict: Verdict,
    pub df_baseline: f64,
    pub df_bounded: f64,
    /// Ordered by decreasing magnitude, then bus id.
    pub support: Vec<SupportEntry>,
    /// ½‖n‖²
    pub objective_l2: f64,
    /// Σ c_i(|n_re,i| + |n_im,i|) under the final weights.
    pub objective_l1: f64,
    /// ‖n‖∞ of the governor power flow.
    pub baseline_n_norm: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub wall_ms: f64,
    /// Support size after each outer iteration.
    pub support_history: Vec<usize>,
    /// Weight changes made by each outer update.
    pub weight_changes: Vec<usize>,
    pub message: Option<String>,
    #[serde(skip)]
    pub state: Option<SystemState>,
    #[serde(skip)]
    pub n: Option<CompensationVector>,
}

fn support_entries(net: &NetworkCase, n: &CompensationVector) -> Vec<SupportEntry> {
    let mut s: Vec<SupportEntry> = n
        .support()
        .into_iter()
        .map(|i| SupportEntry {
            bus: net.buses[i].id,
            n_mag_pu: n.magnitude(i),
            n_re_pu: n.re[i],
            n_im_pu: n.im[i],
        })
        .collect();
    s.sort_by(|a, b| b.n_mag_pu.total_cmp(&a.n_mag_pu).then(a.bus.cmp(&b.bus)));
    s
}

fn nonconverged(
    df_baseline: f64,
    inner: usize,
    outer: usize,
    t0: Instant,
    msg: String,
) -> DiagnosisResult {
    DiagnosisResult {
        verdict: Verdict::Nonconverged,
        df_baseline,
        df_bounded: f64::NAN,
        support: Vec::new(),
        objective_l2: f64::NAN,
        objective_l1: f64::NAN,
        baseline_n_norm: f64::NAN,
        outer_iterations: outer,
        inner_iterations: inner,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        support_history: Vec::new(),
        weight_changes: Vec::new(),
        message: Some(msg),
        state: None,
        n: None,
    }
}

/// Governor power flow, then, if needed, the sparse bounded problem inside
/// the outer weight loop.
pub fn diagnose(
    net: &NetworkCase,
    curves: &[DroopCurve],
    cfg: &DiagConfig,
) -> Result<DiagnosisResult, SolveError> {
    cfg.validate()?;
    let t0 = Instant::now();
    let gpf = match solve_gpf(net, curves, &cfg.solver) {
        Ok(g) if g.converged => g,
        Ok(g) => {
            return Ok(nonconverged(
                g.df,
                g.iterations,
                0,
                t0,
                format!(
                    "governor power flow did not converge in {} iterations (residual {:.3e})",
                    g.iterations, g.residual
                ),
            ))
        }
        Err(e) => {
            return Ok(nonconverged(
                f64::NAN,
                0,
                0,
                t0,
                format!("governor power flow failed: {e}"),
            ))
        }
    };
    Ok(diagnose_from_gpf(net, curves, cfg, &gpf, t0))
}

/// As [`diagnose`], reusing an already solved governor power flow.
pub fn diagnose_from_gpf(
    net: &NetworkCase,
    curves: &[DroopCurve],
    cfg: &DiagConfig,
    gpf: &GpfSolution,
    t0: Instant,
) -> DiagnosisResult {
    let (lo, hi) = cfg.bounds;
    let mut gn = gpf.n.clone();
    gn.support_threshold = cfg.support_threshold;
    let baseline_n = gn.inf_norm();
    let collapsed = baseline_n > cfg.support_threshold;
    let mut inner = gpf.iterations;
    if !collapsed && gpf.df >= lo && gpf.df <= hi {
        return DiagnosisResult {
            verdict: Verdict::Stable,
            df_baseline: gpf.df,
            df_bounded: gpf.df,
            support: Vec::new(),
            objective_l2: gpf.objective,
            objective_l1: 0.0,
            baseline_n_norm: baseline_n,
            outer_iterations: 0,
            inner_iterations: inner,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            support_history: Vec::new(),
            weight_changes: Vec::new(),
            message: None,
            state: Some(gpf.state.clone()),
            n: Some(gn),
        };
    }

    let mut weights = SparsityWeights::uniform(net.n_bus(), cfg.c_low, cfg.c_low, cfg.c_high);
    let mut best: Option<(SparseSolution, SparsityWeights)> = None;
    let mut prev: Option<SparseSolution> = None;
    let mut support_history = Vec::new();
    let mut outer = 0;
    let mut failure = None;
    while outer < cfg.max_outer {
        outer += 1;
        let init = match &prev {
            None => SparseInit::Gpf(gpf),
            Some(p) => SparseInit::Warm(p),
        };
        let sol = match solve_sparse(net, curves, &weights, init, cfg) {
            Ok(s) if s.converged => s,
            Ok(s) => {
                inner += s.iterations;
                failure = Some(format!(
                    "sparse subproblem {outer} did not converge in {} iterations (residual {:.3e})",
                    s.iterations, s.residual
                ));
                break;
            }
            Err(e) => {
                failure = Some(format!("sparse subproblem {outer} failed: {e}"));
                break;
            }
        };
        inner += sol.iterations;
        let size = sol.n.support().len();
        let grew = support_history.last().is_some_and(|&last| size > last);
        support_history.push(size);
        let better = match &best {
            None => true,
            Some((b, bw)) => {
                let bs = b.n.support().len();
                size < bs || (size == bs && sol.objective(&weights) < b.objective(bw))
            }
        };
        if better {
            best = Some((sol.clone(), weights.clone()));
        }
        if grew {
            break;
        }
        let (next, changed) = update_sparsity_weights(&weights, &sol.n, cfg.keep_fraction);
        prev = Some(sol);
        if changed == 0 {
            weights = next;
            break;
        }
        weights = next;
    }
    let Some((sol, w)) = best else {
        return nonconverged(
            gpf.df,
            inner,
            outer,
            t0,
            failure.unwrap_or_else(|| "no sparse subproblem converged".into()),
        );
    };
    let verdict = if collapsed {
        Verdict::CollapsedRecovered
    } else {
        Verdict::UnstableRecovered
    };
    DiagnosisResult {
        verdict,
        df_baseline: gpf.df,
        df_bounded: sol.state.df,
        support: support_entries(net, &sol.n),
        objective_l2: 0.5 * sol.n.l2_sq(),
        objective_l1: sol.n.weighted_l1(&w.c),
        baseline_n_norm: baseline_n,
        outer_iterations: outer,
        inner_iterations: inner,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        support_history,
        weight_changes: weights.history.clone(),
        message: failure,
        state: Some(sol.state.clone()),
        n: Some(sol.n.clone()),
    }
}
