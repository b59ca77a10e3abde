//! N-1 generator outage sweeps.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::case_io::{CaseError, GenId, NetworkCase};
use crate::droop::{build_droop_curves, DroopOptions};
use crate::gpf::{balance_base_case, SolveError};
use crate::sparse_diag::{diagnose, DiagConfig, DiagnosisResult, SupportEntry, Verdict};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error("base case: {0}")]
    Solve(#[from] SolveError),
    #[error("a study needs at least two in-service generators, the case has {0}")]
    TooFewGenerators(usize),
    #[error("invalid study: {0}")]
    Spec(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudySpec {
    pub case_path: PathBuf,
    /// `None` sweeps every in-service generator.
    pub top_k: Option<usize>,
    pub droop: DroopOptions,
    /// Frequency band and solver settings.
    pub diag: DiagConfig,
    pub workers: usize,
    pub f_nominal: Option<f64>,
}

impl StudySpec {
    pub fn new(case_path: impl Into<PathBuf>, bounds: (f64, f64)) -> Self {
        Self {
            case_path: case_path.into(),
            top_k: None,
            droop: DroopOptions::default(),
            diag: DiagConfig::default().with_bounds(bounds.0, bounds.1),
            workers: 1,
            f_nominal: None,
        }
    }

    fn validate(&self) -> Result<(), StudyError> {
        if self.top_k == Some(0) {
            return Err(StudyError::Spec("top_k must be at least 1".into()));
        }
        let (lo, hi) = self.diag.bounds;
        if !(lo < 0.0 && hi > 0.0) {
            return Err(StudyError::Spec(format!(
                "bounds [{lo}, {hi}] Hz must straddle zero"
            )));
        }
        self.diag.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub gen_id: GenId,
    /// External id of the tripped unit's bus.
    pub bus: i64,
    pub mw_lost: f64,
    pub df_baseline_hz: f64,
    pub df_bounded_hz: f64,
    pub verdict: Verdict,
    pub support: Vec<SupportEntry>,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub wall_ms: f64,
    pub message: Option<String>,
}

impl StudyRow {
    pub fn from_diagnosis(gen_id: GenId, bus: i64, mw_lost: f64, d: &DiagnosisResult) -> Self {
        Self {
            gen_id,
            bus,
            mw_lost,
            df_baseline_hz: d.df_baseline,
            df_bounded_hz: d.df_bounded,
            verdict: d.verdict,
            support: d.support.clone(),
            outer_iterations: d.outer_iterations,
            inner_iterations: d.inner_iterations,
            wall_ms: d.wall_ms,
            message: d.message.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StudyStats {
    pub stable: usize,
    pub unstable_recovered: usize,
    pub collapsed_recovered: usize,
    pub nonconverged: usize,
    /// Largest |Δf| of the governor power flow over the converged rows, Hz.
    pub max_abs_df_baseline_hz: f64,
    pub total_wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    /// Case name (file stem).
    pub case: String,
    pub bounds_hz: (f64, f64),
    pub droop_pct: f64,
    pub delta_hz: f64,
    pub base_mva: f64,
    pub rows: Vec<StudyRow>,
    pub stats: StudyStats,
}

impl StudyReport {
    pub fn count(&self, v: Verdict) -> usize {
        self.rows.iter().filter(|r| r.verdict == v).count()
    }

    /// `(MW lost, baseline Δf)` pairs in row order.
    pub fn baseline_series(&self) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .map(|r| (r.mw_lost, r.df_baseline_hz))
            .collect()
    }

    /// `(MW lost, bounded Δf)` pairs in row order.
    pub fn bounded_series(&self) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .map(|r| (r.mw_lost, r.df_bounded_hz))
            .collect()
    }

    pub fn compute_stats(rows: &[StudyRow], total_wall_ms: f64) -> StudyStats {
        let mut s = StudyStats {
            total_wall_ms,
            ..Default::default()
        };
        for r in rows {
            match r.verdict {
                Verdict::Stable => s.stable += 1,
                Verdict::UnstableRecovered => s.unstable_recovered += 1,
                Verdict::CollapsedRecovered => s.collapsed_recovered += 1,
                Verdict::Nonconverged => s.nonconverged += 1,
            }
            if r.df_baseline_hz.is_finite() {
                s.max_abs_df_baseline_hz = s.max_abs_df_baseline_hz.max(r.df_baseline_hz.abs());
            }
        }
        s
    }
}

/// In-service units by decreasing scheduled output, ties by ascending bus id,
/// truncated to `top_k`.
pub fn enumerate_outages(
    net: &NetworkCase,
    top_k: Option<usize>,
) -> Result<Vec<GenId>, StudyError> {
    if net.gens.len() < 2 {
        return Err(StudyError::TooFewGenerators(net.gens.len()));
    }
    let mut order: Vec<_> = net.gens.iter().collect();
    order.sort_by(|a, b| {
        b.pg.total_cmp(&a.pg)
            .then(net.buses[a.bus].id.cmp(&net.buses[b.bus].id))
            .then(a.id.cmp(&b.id))
    });
    let k = top_k.unwrap_or(order.len()).min(order.len());
    Ok(order.into_iter().take(k).map(|g| g.id).collect())
}

/// Trip one unit of a balanced base case and diagnose the result.
pub fn run_contingency(base: &NetworkCase, gen: GenId, spec: &StudySpec) -> StudyRow {
    let t0 = Instant::now();
    let pos = base.gen_position(gen);
    let bus = pos.map_or(-1, |p| base.buses[base.gens[p].bus].id);
    let mw = pos.map_or(f64::NAN, |p| base.gens[p].pg * base.base_mva);
    let failed = |msg: String| StudyRow {
        gen_id: gen,
        bus,
        mw_lost: mw,
        df_baseline_hz: f64::NAN,
        df_bounded_hz: f64::NAN,
        verdict: Verdict::Nonconverged,
        support: Vec::new(),
        outer_iterations: 0,
        inner_iterations: 0,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        message: Some(msg),
    };
    let net = match base.apply_contingency(gen) {
        Ok(n) => n,
        Err(e) => return failed(e.to_string()),
    };
    let curves = match build_droop_curves(&net, &spec.droop) {
        Ok(c) => c,
        Err(e) => return failed(e.to_string()),
    };
    match diagnose(&net, &curves, &spec.diag) {
        Ok(d) => StudyRow::from_diagnosis(gen, bus, net.mw_lost(), &d),
        Err(e) => failed(e.to_string()),
    }
}

/// Load, balance and sweep the case described by `spec`.
pub fn run_study(spec: &StudySpec) -> Result<StudyReport, StudyError> {
    let mut net = NetworkCase::load(&spec.case_path)?;
    if let Some(f) = spec.f_nominal {
        net = net.with_nominal_frequency(f);
    }
    let case = spec
        .case_path
        .file_stem()
        .map_or_else(|| "case".to_string(), |s| s.to_string_lossy().into_owned());
    run_study_on(&net, &case, spec)
}

/// Sweep an already loaded case.
pub fn run_study_on(
    net: &NetworkCase,
    case: &str,
    spec: &StudySpec,
) -> Result<StudyReport, StudyError> {
    spec.validate()?;
    let t0 = Instant::now();
    let base = balance_base_case(net, &spec.diag.solver)?;
    let outages = enumerate_outages(&base, spec.top_k)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers.max(1))
        .build()
        .map_err(|e| StudyError::Pool(e.to_string()))?;
    let mut rows: Vec<StudyRow> = pool.install(|| {
        outages
            .par_iter()
            .map(|&g| run_contingency(&base, g, spec))
            .collect()
    });
    rows.sort_by(|a, b| {
        b.mw_lost
            .total_cmp(&a.mw_lost)
            .then(a.bus.cmp(&b.bus))
            .then(a.gen_id.cmp(&b.gen_id))
    });
    let total = t0.elapsed().as_secs_f64() * 1e3;
    Ok(StudyReport {
        case: case.to_string(),
        bounds_hz: spec.diag.bounds,
        droop_pct: spec.droop.droop_pct,
        delta_hz: spec.droop.smoothing_halfwidth,
        base_mva: net.base_mva,
        stats: StudyReport::compute_stats(&rows, total),
        rows,
    })
}
