//! Five-region droop characteristic ΔP = F(Δf).
//!
//! The linear region `F = -k·Δf` is bounded by the unit's headroom
//! (`dp_max = Pmax - Pg`) and footroom (`dp_min = Pmin - Pg`). Each corner of
//! the ideal clipped line is replaced by a parabola of half-width `δ` centred on
//! the corner, which is the only quadratic matching value and slope on both
//! sides. All frequencies are in Hz, powers in p.u.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case_io::{Generator, NetworkCase};

/// Narrowest corner transition, used when a unit sits at (or next to) a limit.
pub const MIN_HALFWIDTH: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DroopError {
    #[error("droop percentage must be positive, got {0}")]
    NonPositiveDroop(f64),
    #[error("smoothing half-width must be positive, got {0}")]
    NonPositiveHalfwidth(f64),
    #[error("generator {gen}: corner transitions overlap (linear region {width} Hz wide)")]
    Degenerate { gen: usize, width: f64 },
}

/// Which MW rating spans the droop percentage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum RatingBase {
    /// Unit maximum output `Pmax`.
    #[default]
    Pmax,
    /// Machine base `mBase`, falling back to `Pmax` when not positive.
    MBase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroopOptions {
    /// Fractional droop, e.g. 0.04.
    pub droop_pct: f64,
    /// Upper bound on each corner's smoothing half-width, Hz.
    pub smoothing_halfwidth: f64,
    pub rating: RatingBase,
}

impl Default for DroopOptions {
    fn default() -> Self {
        Self {
            droop_pct: 0.04,
            smoothing_halfwidth: 0.05,
            rating: RatingBase::Pmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroopCurve {
    /// Droop gain, p.u. power per Hz.
    pub k: f64,
    pub dp_min: f64,
    pub dp_max: f64,
    pub f1: f64,
    pub f2: f64,
    pub f3: f64,
    pub f4: f64,
    pub a1: f64,
    pub b1: f64,
    pub c1: f64,
    pub a2: f64,
    pub b2: f64,
    pub c2: f64,
}

fn corner_halfwidth(corner: f64, cap: f64) -> f64 {
    (0.25 * corner.abs()).min(cap).max(MIN_HALFWIDTH)
}

/// Build the droop curve of one unit.
///
/// Headroom and footroom are taken from the scheduled output clamped into
/// `[Pmin, Pmax]`, so a unit scheduled outside its limits gets a collapsed
/// side instead of an inverted one.
pub fn build_droop_curve(
    gen: &Generator,
    opts: &DroopOptions,
    f_nominal: f64,
) -> Result<DroopCurve, DroopError> {
    if !(opts.droop_pct > 0.0) {
        return Err(DroopError::NonPositiveDroop(opts.droop_pct));
    }
    if !(opts.smoothing_halfwidth > 0.0) {
        return Err(DroopError::NonPositiveHalfwidth(opts.smoothing_halfwidth));
    }
    let rated = match opts.rating {
        RatingBase::Pmax => gen.pmax,
        RatingBase::MBase if gen.mbase > 0.0 => gen.mbase,
        RatingBase::MBase => gen.pmax,
    };
    let pg = gen.pg.clamp(gen.pmin.min(gen.pmax), gen.pmax.max(gen.pmin));
    let dp_max = (gen.pmax - pg).max(0.0);
    let dp_min = (gen.pmin - pg).min(0.0);

    if !(rated > 0.0) {
        // no droop capability: F is identically zero
        return Ok(DroopCurve::flat(dp_min, dp_max));
    }
    let k = rated / (opts.droop_pct * f_nominal);
    DroopCurve::from_corners(k, dp_min, dp_max, opts.smoothing_halfwidth).map_err(|width| {
        DroopError::Degenerate {
            gen: gen.id.0,
            width,
        }
    })
}

/// Curves for every in-service generator of `net`, in `net.gens` order.
pub fn build_droop_curves(
    net: &NetworkCase,
    opts: &DroopOptions,
) -> Result<Vec<DroopCurve>, DroopError> {
    net.gens
        .iter()
        .map(|g| build_droop_curve(g, opts, net.f_nominal))
        .collect()
}

impl DroopCurve {
    /// Construct from gain, saturation levels and a half-width cap. Returns the
    /// linear-region width as the error when the two transitions would overlap.
    pub fn from_corners(k: f64, dp_min: f64, dp_max: f64, halfwidth_cap: f64) -> Result<Self, f64> {
        let corner_lo = -dp_max / k;
        let corner_hi = -dp_min / k;
        let width = corner_hi - corner_lo;
        let d_lo = corner_halfwidth(corner_lo, halfwidth_cap);
        let d_hi = corner_halfwidth(corner_hi, halfwidth_cap);
        if d_lo + d_hi >= width {
            return Err(width);
        }
        let f1 = corner_hi + d_hi;
        let f2 = corner_hi - d_hi;
        let f3 = corner_lo + d_lo;
        let f4 = corner_lo - d_lo;
        // upper corner: F = dp_min + k (Δf - f1)^2 / (4 d_hi)
        let a1 = k / (4.0 * d_hi);
        let b1 = -2.0 * a1 * f1;
        let c1 = dp_min + a1 * f1 * f1;
        // lower corner: F = dp_max - k (Δf - f4)^2 / (4 d_lo)
        let a2 = -k / (4.0 * d_lo);
        let b2 = -2.0 * a2 * f4;
        let c2 = dp_max + a2 * f4 * f4;
        Ok(Self {
            k,
            dp_min,
            dp_max,
            f1,
            f2,
            f3,
            f4,
            a1,
            b1,
            c1,
            a2,
            b2,
            c2,
        })
    }

    fn flat(dp_min: f64, dp_max: f64) -> Self {
        Self {
            k: 0.0,
            dp_min,
            dp_max,
            f1: f64::INFINITY,
            f2: f64::INFINITY,
            f3: f64::NEG_INFINITY,
            f4: f64::NEG_INFINITY,
            a1: 0.0,
            b1: 0.0,
            c1: 0.0,
            a2: 0.0,
            b2: 0.0,
            c2: 0.0,
        }
    }

    pub fn is_flat(&self) -> bool {
        self.k == 0.0
    }

    /// Power adjustment at frequency deviation `df`.
    pub fn eval(&self, df: f64) -> f64 {
        if self.is_flat() {
            0.0
        } else if df >= self.f1 {
            self.dp_min
        } else if df >= self.f2 {
            // vertex form of a1 Δf² + b1 Δf + c1
            let t = df - self.f1;
            self.dp_min + self.a1 * t * t
        } else if df >= self.f3 {
            -self.k * df
        } else if df >= self.f4 {
            let t = df - self.f4;
            self.dp_max + self.a2 * t * t
        } else {
            self.dp_max
        }
    }

    /// dF/dΔf
    pub fn derivative(&self, df: f64) -> f64 {
        if self.is_flat() || df >= self.f1 || df < self.f4 {
            0.0
        } else if df >= self.f2 {
            // 2 a1 Δf + b1, written around the vertex
            2.0 * self.a1 * (df - self.f1)
        } else if df >= self.f3 {
            -self.k
        } else {
            2.0 * self.a2 * (df - self.f4)
        }
    }

    /// d²F/dΔf²
    pub fn second_derivative(&self, df: f64) -> f64 {
        if self.is_flat() || df >= self.f1 || df < self.f4 {
            0.0
        } else if df >= self.f2 {
            2.0 * self.a1
        } else if df >= self.f3 {
            0.0
        } else {
            2.0 * self.a2
        }
    }

    /// True when `df` lies on the linear segment.
    pub fn is_linear_at(&self, df: f64) -> bool {
        !self.is_flat() && df >= self.f3 && df < self.f2
    }
}

/// Aggregate droop gain of a set of curves.
pub fn total_gain(curves: &[DroopCurve]) -> f64 {
    curves.iter().map(|c| c.k).sum()
}
