//! Primal-dual Newton engine shared by the dense and the sparse problems.
//!
//! The problem solved is
//!
//! ```text
//! min  Σ_r φ_r(n_r) − μ ln(f_max − Δf) − μ ln(Δf − f_min)
//! s.t. residual(x) + E n = 0
//! ```
//!
//! where `E` places one compensation component on each KCL row. A component
//! is either dense (`φ = ½n²`, `n` free) or split (`n = a − b`, `a, b ≥ 0`,
//! `φ = ½(a−b)² + c(a+b)` with log barriers on `a` and `b`). The component
//! variables are eliminated row by row, which leaves the symmetric system
//!
//! ```text
//! [ H + Σ   Jᵀ ] [Δx]   [ r_d ]
//! [ J      −D  ] [Δλ] = [ r_p ]
//! ```
//!
//! whose sparsity pattern never changes, so one symbolic LU serves a whole
//! solve.

use crate::linalg::{LinalgError, SparseSystem};
use crate::network::{ModelError, NetworkModel};

const TAU: f64 = 0.995;
const MU_MIN: f64 = 1e-9;
/// Tiny diagonal added to the Δf stationarity entry. It only affects the
/// Newton direction when every unit is saturated and Δf is otherwise free.
const DF_REGULARIZATION: f64 = 1e-8;
const MAX_BACKTRACKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Penalty {
    Dense,
    Split(f64),
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct StepRules {
    pub v_step_limit: f64,
    pub df_step_limit: f64,
    pub damping_factor: f64,
}

pub(crate) struct Problem<'a, 'm> {
    pub model: &'a NetworkModel<'m>,
    /// One entry per KCL row (`2·n_bus`).
    pub penalty: Vec<Penalty>,
    pub bounds: Option<(f64, f64)>,
    pub steps: StepRules,
    pub tol: f64,
    pub max_iters: usize,
    pub sigma: f64,
}

/// Full primal-dual iterate.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Iterate {
    pub x: Vec<f64>,
    pub lam: Vec<f64>,
    /// Interleaved compensation, `a − b` for split components.
    pub n: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub za: Vec<f64>,
    pub zb: Vec<f64>,
    pub z_up: f64,
    pub z_lo: f64,
}

#[derive(Debug, Clone)]
pub(crate) enum EngineError {
    Model(ModelError),
    Singular { row: usize },
    Linalg(LinalgError),
}

impl From<ModelError> for EngineError {
    fn from(e: ModelError) -> Self {
        EngineError::Model(e)
    }
}

impl From<LinalgError> for EngineError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::SingularPivot { row } => EngineError::Singular { row },
            other => EngineError::Linalg(other),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    pub mu: f64,
    /// True objective after each completed barrier level.
    pub objective_history: Vec<f64>,
}

struct Eval {
    res: Vec<f64>,
    jac: Vec<(usize, usize, f64)>,
    norm: f64,
}

impl Iterate {
    pub fn new(x: Vec<f64>, n_rows: usize, n: Vec<f64>) -> Self {
        let m = n.len();
        Self {
            x,
            lam: vec![0.0; n_rows],
            n,
            a: vec![0.0; m],
            b: vec![0.0; m],
            za: vec![0.0; m],
            zb: vec![0.0; m],
            z_up: 0.0,
            z_lo: 0.0,
        }
    }

    /// Place every barrier quantity on the central path for `mu`, keeping `x`
    /// and `n`. KCL multipliers are set to the values that make the
    /// component stationarity exact.
    pub fn center(&mut self, problem: &Problem<'_, '_>, mu: f64) {
        for (r, p) in problem.penalty.iter().enumerate() {
            let n = self.n[r];
            match *p {
                Penalty::Dense => {
                    self.lam[r] = -n;
                    self.a[r] = 0.0;
                    self.b[r] = 0.0;
                    self.za[r] = 0.0;
                    self.zb[r] = 0.0;
                }
                Penalty::Split(c) => {
                    // roots of 2c·a² − 2(cn + μ)·a + μn = 0 with b = a − n; the
                    // small part uses the product form to avoid cancellation
                    let s = (c * c * n * n + mu * mu).sqrt();
                    let t = c * n / (s + mu);
                    let (a, b) = if n >= 0.0 {
                        ((c * n + mu + s) / (2.0 * c), mu / (c * (1.0 + t)))
                    } else {
                        (mu / (c * (1.0 - t)), (mu - c * n + s) / (2.0 * c))
                    };
                    self.a[r] = a;
                    self.b[r] = b;
                    self.n[r] = a - b;
                    self.za[r] = mu / a;
                    self.zb[r] = mu / b;
                    self.lam[r] = self.za[r] - c - n;
                }
            }
        }
        if let Some((lo, hi)) = problem.bounds {
            let df = self.x[problem.model.layout.df().expect("bounds need Δf")];
            self.z_up = mu / (hi - df);
            self.z_lo = mu / (df - lo);
        }
    }

    pub fn objective(&self, problem: &Problem<'_, '_>) -> f64 {
        problem
            .penalty
            .iter()
            .zip(&self.n)
            .map(|(p, n)| {
                let c = match p {
                    Penalty::Dense => 0.0,
                    Penalty::Split(c) => *c,
                };
                0.5 * n * n + c * n.abs()
            })
            .sum()
    }
}

impl<'a, 'm> Problem<'a, 'm> {
    fn has_barrier(&self) -> bool {
        self.bounds.is_some() || self.penalty.iter().any(|p| matches!(p, Penalty::Split(_)))
    }

    fn nx(&self) -> usize {
        self.model.layout.n_unknowns()
    }

    fn evaluate(&self, it: &Iterate, mu: f64) -> Result<Eval, EngineError> {
        let res = self.model.residual(&it.x, &it.n)?;
        let jac = self.model.jacobian(&it.x)?;
        let mut norm = inf(&res);
        // dual stationarity in x
        let mut grad = vec![0.0; self.nx()];
        for &(r, c, v) in &jac {
            grad[c] += v * it.lam[r];
        }
        if let Some((lo, hi)) = self.bounds {
            let f = self.model.layout.df().expect("bounds need Δf");
            grad[f] += it.z_up - it.z_lo;
            let s_up = hi - it.x[f];
            let s_lo = it.x[f] - lo;
            norm = norm
                .max((it.z_up * s_up - mu).abs())
                .max((it.z_lo * s_lo - mu).abs());
        }
        norm = norm.max(inf(&grad));
        for (r, p) in self.penalty.iter().enumerate() {
            match *p {
                Penalty::Dense => norm = norm.max((it.n[r] + it.lam[r]).abs()),
                Penalty::Split(c) => {
                    let d = it.a[r] - it.b[r];
                    norm = norm
                        .max((d + c + it.lam[r] - it.za[r]).abs())
                        .max((-d + c - it.lam[r] - it.zb[r]).abs())
                        .max((it.za[r] * it.a[r] - mu).abs())
                        .max((it.zb[r] * it.b[r] - mu).abs());
                }
            }
        }
        if !norm.is_finite() {
            return Err(EngineError::Model(ModelError::SingularInjection {
                bus_id: -1,
                magnitude: f64::NAN,
            }));
        }
        Ok(Eval { res, jac, norm })
    }

    /// Assemble and solve one Newton system with `delta` added to the
    /// diagonal of the primal block.
    fn direction(
        &self,
        it: &Iterate,
        ev: &Eval,
        mu: f64,
        delta: f64,
        sys: &mut Option<SparseSystem>,
    ) -> Result<Direction, EngineError> {
        let nx = self.nx();
        let nr = self.model.layout.n_rows();
        let nk = self.penalty.len();
        let df_col = self.model.layout.df();

        let mut t = self.model.hessian(&it.x, &it.lam)?;
        t.reserve(2 * ev.jac.len() + nx + nr + 1);
        for &(r, c, v) in &ev.jac {
            t.push((nx + r, c, v));
            t.push((c, nx + r, v));
        }
        // pushed even when zero so the pattern stays fixed
        for i in 0..nx {
            t.push((i, i, delta));
        }
        let mut rhs = vec![0.0; nx + nr];
        for &(r, c, v) in &ev.jac {
            rhs[c] -= v * it.lam[r];
        }
        if let Some(f) = df_col {
            let mut hff = DF_REGULARIZATION;
            if let Some((lo, hi)) = self.bounds {
                let s_up = hi - it.x[f];
                let s_lo = it.x[f] - lo;
                hff += it.z_up / s_up + it.z_lo / s_lo;
                rhs[f] -= mu / s_up - mu / s_lo;
            }
            t.push((f, f, hff));
        }

        // condensed component rows
        let mut split_aux = vec![(0.0, 0.0, 0.0, 0.0, 0.0); nk];
        for r in 0..nr {
            let mut d = 0.0;
            rhs[nx + r] = -ev.res[r];
            if r < nk {
                match self.penalty[r] {
                    Penalty::Dense => {
                        d = 1.0;
                        rhs[nx + r] += it.n[r] + it.lam[r];
                    }
                    Penalty::Split(c) => {
                        let (a, b) = (it.a[r], it.b[r]);
                        let sa = it.za[r] / a;
                        let sb = it.zb[r] / b;
                        let det = sa + sb + sa * sb;
                        let diff = a - b;
                        let ra = -(diff + c + it.lam[r] - mu / a);
                        let rb = -(-diff + c - it.lam[r] - mu / b);
                        d = (sa + sb) / det;
                        rhs[nx + r] -= (sb * ra - sa * rb) / det;
                        split_aux[r] = (sa, sb, det, ra, rb);
                    }
                }
            }
            t.push((nx + r, nx + r, -d));
        }

        match sys {
            Some(s) => s.update(&t)?,
            None => *sys = Some(SparseSystem::assemble(nx + nr, &t)?),
        }
        let mut sol = sys.as_mut().expect("assembled").factor_and_solve(&rhs)?;
        let dlam = sol.split_off(nx);
        let dx = sol;

        let mut d = Direction {
            dn: vec![0.0; nk],
            da: vec![0.0; nk],
            db: vec![0.0; nk],
            dza: vec![0.0; nk],
            dzb: vec![0.0; nk],
            dz_up: 0.0,
            dz_lo: 0.0,
            alpha_p: 1.0,
            alpha_d: 1.0,
            damped: false,
            dx,
            dlam,
        };
        for r in 0..nk {
            match self.penalty[r] {
                Penalty::Dense => d.dn[r] = -(it.n[r] + it.lam[r]) - d.dlam[r],
                Penalty::Split(_) => {
                    let (sa, sb, det, ra, rb) = split_aux[r];
                    let pa = ra - d.dlam[r];
                    let pb = rb + d.dlam[r];
                    d.da[r] = ((1.0 + sb) * pa + pb) / det;
                    d.db[r] = (pa + (1.0 + sa) * pb) / det;
                    d.dza[r] = mu / it.a[r] - it.za[r] - sa * d.da[r];
                    d.dzb[r] = mu / it.b[r] - it.zb[r] - sb * d.db[r];
                    d.dn[r] = d.da[r] - d.db[r];
                }
            }
        }

        // step length: fraction to the boundary, then voltage/frequency limiting
        let shrink = |alpha: &mut f64, v: f64, dv: f64| {
            if dv < 0.0 {
                *alpha = alpha.min(-TAU * v / dv);
            }
        };
        let (mut ap, mut ad) = (1.0f64, 1.0f64);
        for r in 0..nk {
            if let Penalty::Split(_) = self.penalty[r] {
                shrink(&mut ap, it.a[r], d.da[r]);
                shrink(&mut ap, it.b[r], d.db[r]);
                shrink(&mut ad, it.za[r], d.dza[r]);
                shrink(&mut ad, it.zb[r], d.dzb[r]);
            }
        }
        if let (Some((lo, hi)), Some(f)) = (self.bounds, df_col) {
            let s_up = hi - it.x[f];
            let s_lo = it.x[f] - lo;
            let ddf = d.dx[f];
            shrink(&mut ap, s_up, -ddf);
            shrink(&mut ap, s_lo, ddf);
            d.dz_up = mu / s_up - it.z_up + it.z_up / s_up * ddf;
            d.dz_lo = mu / s_lo - it.z_lo - it.z_lo / s_lo * ddf;
            shrink(&mut ad, it.z_up, d.dz_up);
            shrink(&mut ad, it.z_lo, d.dz_lo);
        }
        let layout = &self.model.layout;
        let dv_max = (0..layout.n_bus)
            .map(|i| d.dx[layout.vr(i)].abs().max(d.dx[layout.vi(i)].abs()))
            .fold(0.0, f64::max);
        let mut damp: f64 = 1.0;
        if dv_max > self.steps.v_step_limit {
            damp = damp.min(self.steps.v_step_limit / dv_max);
        }
        if let Some(f) = df_col {
            if d.dx[f].abs() > self.steps.df_step_limit {
                damp = damp.min(self.steps.df_step_limit / d.dx[f].abs());
            }
        }
        if damp < 1.0 {
            damp *= self.steps.damping_factor;
        }
        d.damped = damp < TRUST_DAMPING;
        d.alpha_p = ap.min(damp);
        d.alpha_d = ad;
        log::trace!(
            "mu {mu:.1e} residual {:.3e} delta {delta:.1e} alpha_p {:.3e} alpha_d {:.3e} max dV {dv_max:.3e}",
            ev.norm,
            d.alpha_p,
            d.alpha_d
        );
        Ok(d)
    }

    fn apply(&self, it: &Iterate, d: &Direction, ap: f64, ad: f64) -> Iterate {
        let mut next = it.clone();
        for (v, dv) in next.x.iter_mut().zip(&d.dx) {
            *v += ap * dv;
        }
        for (v, dv) in next.lam.iter_mut().zip(&d.dlam) {
            *v += ap * dv;
        }
        for r in 0..self.penalty.len() {
            match self.penalty[r] {
                Penalty::Dense => next.n[r] += ap * d.dn[r],
                Penalty::Split(_) => {
                    next.a[r] += ap * d.da[r];
                    next.b[r] += ap * d.db[r];
                    next.n[r] = next.a[r] - next.b[r];
                    next.za[r] += ad * d.dza[r];
                    next.zb[r] += ad * d.dzb[r];
                }
            }
        }
        next.z_up += ad * d.dz_up;
        next.z_lo += ad * d.dz_lo;
        next
    }

    /// Exact-penalty merit: barrier objective plus `rho·‖residual‖₁`.
    fn merit(&self, it: &Iterate, res: &[f64], mu: f64, rho: f64) -> f64 {
        let mut phi = 0.0;
        for (r, p) in self.penalty.iter().enumerate() {
            match *p {
                Penalty::Dense => phi += 0.5 * it.n[r] * it.n[r],
                Penalty::Split(c) => {
                    let n = it.a[r] - it.b[r];
                    phi +=
                        0.5 * n * n + c * (it.a[r] + it.b[r]) - mu * (it.a[r].ln() + it.b[r].ln());
                }
            }
        }
        if let Some((lo, hi)) = self.bounds {
            let f = it.x[self.model.layout.df().expect("bounds need Δf")];
            phi -= mu * ((hi - f).ln() + (f - lo).ln());
        }
        phi + rho * res.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// One globalized Newton iteration. Steps are accepted when they lower
    /// the merit function or clearly reduce the optimality residual;
    /// otherwise the step is shortened and, failing that, the primal block is
    /// regularized more strongly.
    fn iterate(
        &self,
        it: &Iterate,
        ev: &Eval,
        mu: f64,
        ctl: &mut Control,
        sys: &mut Option<SparseSystem>,
    ) -> Result<(Iterate, Eval), EngineError> {
        let mut delta = if ctl.delta > DELTA_MIN {
            ctl.delta / 4.0
        } else {
            0.0
        };
        let mut fallback: Option<(Iterate, Eval)> = None;
        let mut last_err = None;
        for attempt in 0..MAX_REGULARIZATIONS {
            let d = match self.direction(it, ev, mu, delta, sys) {
                Ok(d) => d,
                Err(e @ EngineError::Singular { .. }) => {
                    last_err = Some(e);
                    delta = (delta * 10.0).max(DELTA_START);
                    continue;
                }
                Err(e) => return Err(e),
            };
            // a direction far outside the step limits means the Newton model
            // is poor here; shrink it by regularizing instead of cutting it
            if d.damped && attempt + 1 < MAX_REGULARIZATIONS && delta < DELTA_MAX {
                delta = (delta * 10.0).max(DELTA_START);
                continue;
            }
            let lam_max = it
                .lam
                .iter()
                .zip(&d.dlam)
                .fold(0.0f64, |m, (l, dl)| m.max((l + dl).abs()));
            ctl.rho = ctl.rho.max(2.0 * lam_max + 1.0);
            let m0 = self.merit(it, &ev.res, mu, ctl.rho);
            let mut ap = d.alpha_p;
            let mut ad = d.alpha_d;
            for _ in 0..MAX_BACKTRACKS {
                let trial = self.apply(it, &d, ap, ad);
                if let Ok(e) = self.evaluate(&trial, mu) {
                    let m1 = self.merit(&trial, &e.res, mu, ctl.rho);
                    if m1 < m0 || e.norm < 0.9 * ev.norm {
                        ctl.delta = delta;
                        return Ok((trial, e));
                    }
                    if fallback.is_none() {
                        fallback = Some((trial, e));
                    }
                }
                ap *= 0.5;
                ad *= 0.5;
            }
            delta = (delta * 10.0).max(DELTA_START);
        }
        ctl.delta = delta;
        match fallback {
            Some(f) => Ok(f),
            None => Err(
                last_err.unwrap_or(EngineError::Model(ModelError::SingularInjection {
                    bus_id: -1,
                    magnitude: f64::NAN,
                })),
            ),
        }
    }

    /// Run the barrier schedule from `mu0`. `it` holds the best iterate on
    /// return, whether or not the solve converged.
    pub fn solve(
        &self,
        it: &mut Iterate,
        mu0: f64,
        sys: &mut Option<SparseSystem>,
    ) -> Result<Outcome, EngineError> {
        let barrier = self.has_barrier();
        let mut mu = if barrier { mu0 } else { 0.0 };
        let mut iterations = 0;
        let mut history = Vec::new();
        let mut ctl = Control {
            delta: 0.0,
            rho: 1.0,
        };
        let mut ev = self.evaluate(it, mu)?;
        loop {
            let last_level = !barrier || mu < MU_MIN;
            let target = if last_level {
                self.tol
            } else {
                (1e-2 * mu).max(self.tol)
            };
            while ev.norm >= target {
                if iterations >= self.max_iters {
                    return Ok(Outcome {
                        converged: false,
                        iterations,
                        residual: ev.norm,
                        mu,
                        objective_history: history,
                    });
                }
                iterations += 1;
                let (next, e) = self.iterate(it, &ev, mu, &mut ctl, sys)?;
                *it = next;
                ev = e;
            }
            if last_level {
                // a few extra Newton steps tighten complementarity well below
                // the stopping tolerance
                for _ in 0..POLISH_STEPS {
                    if ev.norm < POLISH_FLOOR || iterations >= self.max_iters {
                        break;
                    }
                    let before = ev.norm;
                    let (next, e) = self.iterate(it, &ev, mu, &mut ctl, sys)?;
                    if !(e.norm < 0.5 * before) {
                        break;
                    }
                    iterations += 1;
                    *it = next;
                    ev = e;
                }
            }
            if barrier {
                history.push(it.objective(self));
            }
            if last_level {
                return Ok(Outcome {
                    converged: true,
                    iterations,
                    residual: ev.norm,
                    mu,
                    objective_history: history,
                });
            }
            mu *= self.sigma;
            ev = self.evaluate(it, mu)?;
        }
    }
}

const DELTA_MIN: f64 = 1e-8;
const DELTA_START: f64 = 1e-4;
const DELTA_MAX: f64 = 1e2;
const TRUST_DAMPING: f64 = 0.05;
const MAX_REGULARIZATIONS: usize = 12;
const POLISH_STEPS: usize = 3;
const POLISH_FLOOR: f64 = 1e-12;

struct Control {
    delta: f64,
    rho: f64,
}

struct Direction {
    dx: Vec<f64>,
    dlam: Vec<f64>,
    dn: Vec<f64>,
    da: Vec<f64>,
    db: Vec<f64>,
    dza: Vec<f64>,
    dzb: Vec<f64>,
    dz_up: f64,
    dz_lo: f64,
    alpha_p: f64,
    alpha_d: f64,
    /// Voltage or frequency limiting cut the step hard.
    damped: bool,
}

fn inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
