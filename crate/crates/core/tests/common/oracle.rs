//! Brute-force support enumeration for small networks.
//!
//! The network equations are written here in polar voltage coordinates with
//! the frequency deviation pinned at a given value, so that nothing below
//! shares code with the solver under test. A bus subset `S` is feasible when
//! the current-balance equations can be satisfied with compensation only at
//! the buses of `S`; the least-squares residual is minimized with
//! Levenberg-Marquardt.

use gridfreq_core::{BusKind, DroopCurve, NetworkCase};

/// Droop response of every unit at a fixed frequency deviation.
pub fn droop_at(curves: &[DroopCurve], df: f64) -> Vec<f64> {
    curves.iter().map(|c| c.eval(df)).collect()
}
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

/// Residual below which a subset counts as feasible.
pub const FEASIBLE: f64 = 1e-8;

pub struct Oracle {
    n: usize,
    y: DMatrix<C64>,
    slack: usize,
    slack_angle: f64,
    /// Fixed magnitude for regulated buses.
    vset: Vec<Option<f64>>,
    p: Vec<f64>,
    q_fixed: Vec<f64>,
}

/// Unknown layout for one subset: angles, free magnitudes, regulated Q, then
/// the compensation components that are allowed to be nonzero.
struct Vars {
    theta: Vec<Option<usize>>,
    vm: Vec<Option<usize>>,
    q: Vec<Option<usize>>,
    n_re: Vec<Option<usize>>,
    n_im: Vec<Option<usize>>,
    len: usize,
}

impl Oracle {
    /// `y` must be indexed like `net.buses`; `dp` holds the droop response of
    /// every unit in `net.gens` order.
    pub fn new(net: &NetworkCase, y: DMatrix<C64>, dp: &[f64]) -> Self {
        let n = net.n_bus();
        assert_eq!(y.nrows(), n);
        assert_eq!(dp.len(), net.gens.len());
        let mut p: Vec<f64> = net.buses.iter().map(|b| -b.pd).collect();
        let mut q_fixed: Vec<f64> = net.buses.iter().map(|b| -b.qd).collect();
        let mut vset = vec![None; n];
        for (g, d) in net.gens.iter().zip(dp) {
            p[g.bus] += g.pg + d;
            let kind = net.buses[g.bus].kind;
            if matches!(kind, BusKind::Pv | BusKind::Slack) {
                vset[g.bus].get_or_insert(g.vset);
            } else {
                q_fixed[g.bus] += g.qg;
            }
        }
        Self {
            n,
            y,
            slack: net.slack,
            slack_angle: net.slack_angle,
            vset,
            p,
            q_fixed,
        }
    }

    pub fn n_bus(&self) -> usize {
        self.n
    }

    fn vars(&self, support: &[usize], zero: &[(usize, bool)]) -> Vars {
        let mut k = 0;
        let mut next = |on: bool| {
            on.then(|| {
                k += 1;
                k - 1
            })
        };
        let theta = (0..self.n).map(|i| next(i != self.slack)).collect();
        let vm = (0..self.n).map(|i| next(self.vset[i].is_none())).collect();
        let q = (0..self.n).map(|i| next(self.vset[i].is_some())).collect();
        let n_re = (0..self.n)
            .map(|i| next(support.contains(&i) && !zero.contains(&(i, true))))
            .collect();
        let n_im = (0..self.n)
            .map(|i| next(support.contains(&i) && !zero.contains(&(i, false))))
            .collect();
        Vars {
            theta,
            vm,
            q,
            n_re,
            n_im,
            len: k,
        }
    }

    fn voltages(&self, v: &Vars, z: &DVector<f64>) -> Vec<C64> {
        (0..self.n)
            .map(|i| {
                let th = v.theta[i].map_or(self.slack_angle, |k| z[k]);
                let m = v.vm[i].map_or_else(|| self.vset[i].unwrap(), |k| z[k]);
                C64::from_polar(m, th)
            })
            .collect()
    }

    fn compensation(&self, v: &Vars, z: &DVector<f64>) -> Vec<C64> {
        (0..self.n)
            .map(|i| {
                C64::new(
                    v.n_re[i].map_or(0.0, |k| z[k]),
                    v.n_im[i].map_or(0.0, |k| z[k]),
                )
            })
            .collect()
    }

    /// Current balance `(YV)_i - conj(S_i / V_i) + n_i` at every bus.
    fn residual(&self, v: &Vars, z: &DVector<f64>) -> DVector<f64> {
        let volts = self.voltages(v, z);
        let comp = self.compensation(v, z);
        let mut r = DVector::zeros(2 * self.n);
        for i in 0..self.n {
            let mut yv = C64::new(0.0, 0.0);
            for j in 0..self.n {
                yv += self.y[(i, j)] * volts[j];
            }
            let q = self.q_fixed[i] + v.q[i].map_or(0.0, |k| z[k]);
            let s = C64::new(self.p[i], q);
            let g = yv - (s / volts[i]).conj() + comp[i];
            r[2 * i] = g.re;
            r[2 * i + 1] = g.im;
        }
        r
    }

    /// Analytic derivatives in polar form: dV_j/dθ_j = jV_j, dV_j/dm_j = V_j/m_j,
    /// and T_i = conj(S_i)/conj(V_i) has dT/dθ_i = jT, dT/dm_i = -T/m,
    /// dT/dQ_i = -j/conj(V_i).
    fn jacobian(&self, v: &Vars, z: &DVector<f64>) -> DMatrix<f64> {
        let volts = self.voltages(v, z);
        let j_unit = C64::new(0.0, 1.0);
        let mut jac = DMatrix::zeros(2 * self.n, v.len);
        let put = |jac: &mut DMatrix<f64>, i: usize, col: usize, d: C64| {
            jac[(2 * i, col)] += d.re;
            jac[(2 * i + 1, col)] += d.im;
        };
        for i in 0..self.n {
            let q = self.q_fixed[i] + v.q[i].map_or(0.0, |k| z[k]);
            let t = C64::new(self.p[i], q).conj() / volts[i].conj();
            for j in 0..self.n {
                let yij = self.y[(i, j)];
                if yij == C64::new(0.0, 0.0) {
                    continue;
                }
                if let Some(c) = v.theta[j] {
                    put(&mut jac, i, c, yij * j_unit * volts[j]);
                }
                if let Some(c) = v.vm[j] {
                    put(&mut jac, i, c, yij * volts[j] / volts[j].norm());
                }
            }
            if let Some(c) = v.theta[i] {
                put(&mut jac, i, c, -(j_unit * t));
            }
            if let Some(c) = v.vm[i] {
                put(&mut jac, i, c, t / volts[i].norm());
            }
            if let Some(c) = v.q[i] {
                put(&mut jac, i, c, j_unit / volts[i].conj());
            }
            if let Some(c) = v.n_re[i] {
                put(&mut jac, i, c, C64::new(1.0, 0.0));
            }
            if let Some(c) = v.n_im[i] {
                put(&mut jac, i, c, j_unit);
            }
        }
        jac
    }

    /// Largest gap between [`Self::jacobian`] and central differences at a
    /// random-ish point, used to validate the oracle itself.
    pub fn jacobian_self_check(&self, support: &[usize], volts: &[C64]) -> f64 {
        let v = self.vars(support, &[]);
        let mut z = self.start(&v, Some(volts));
        for k in 0..v.len {
            z[k] += 0.01 * ((k * 7919 % 13) as f64 - 6.0) / 6.0;
        }
        let analytic = self.jacobian(&v, &z);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for c in 0..v.len {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[c] += h;
            zm[c] -= h;
            let d = (self.residual(&v, &zp) - self.residual(&v, &zm)) / (2.0 * h);
            for r in 0..2 * self.n {
                worst = worst.max((d[r] - analytic[(r, c)]).abs() / d[r].abs().max(1.0));
            }
        }
        worst
    }

    fn start(&self, v: &Vars, volts: Option<&[C64]>) -> DVector<f64> {
        let mut z = DVector::zeros(v.len);
        for i in 0..self.n {
            let (m, th) = volts.map_or((1.0, self.slack_angle), |vs| (vs[i].norm(), vs[i].arg()));
            if let Some(k) = v.theta[i] {
                z[k] = th;
            }
            if let Some(k) = v.vm[i] {
                z[k] = m;
            }
        }
        z
    }

    /// Smallest attainable residual infinity-norm with compensation limited to
    /// `support`. Gauss-Newton steps come from an SVD of the Jacobian (no
    /// normal equations, so badly scaled networks keep their accuracy); when a
    /// step fails to reduce the residual the Levenberg-Marquardt damped
    /// problem is solved instead.
    pub fn min_residual(&self, support: &[usize], volts: Option<&[C64]>) -> f64 {
        let v = self.vars(support, &[]);
        let mut z = self.start(&v, volts);
        let mut r = self.residual(&v, &z);
        let mut lambda: f64 = 1e-6;
        let accept = |rt: &DVector<f64>, r: &DVector<f64>| {
            rt.iter().all(|x| x.is_finite()) && rt.norm() < r.norm()
        };
        for _ in 0..200 {
            if r.amax() < 1e-13 {
                break;
            }
            let j = self.jacobian(&v, &z);
            let svd = j.clone().svd(true, true);
            let cut = 1e-13 * svd.singular_values.max();
            if let Ok(dz) = svd.solve(&(-&r), cut) {
                let zt = &z + &dz;
                let rt = self.residual(&v, &zt);
                if accept(&rt, &r) {
                    z = zt;
                    r = rt;
                    continue;
                }
            }
            let mut moved = false;
            while lambda < 1e12 {
                let m = j.nrows();
                let mut aug = DMatrix::zeros(m + v.len, v.len);
                aug.rows_mut(0, m).copy_from(&j);
                aug.rows_mut(m, v.len)
                    .copy_from(&(DMatrix::identity(v.len, v.len) * lambda.sqrt()));
                let mut rhs = DVector::zeros(m + v.len);
                rhs.rows_mut(0, m).copy_from(&(-&r));
                let Ok(dz) = aug.svd(true, true).solve(&rhs, 0.0) else {
                    break;
                };
                let zt = &z + dz;
                let rt = self.residual(&v, &zt);
                if accept(&rt, &r) {
                    z = zt;
                    r = rt;
                    lambda = (lambda / 10.0).max(1e-12);
                    moved = true;
                    break;
                }
                lambda *= 10.0;
            }
            if !moved {
                break;
            }
        }
        r.amax()
    }

    pub fn feasible(&self, support: &[usize], volts: Option<&[C64]>) -> bool {
        let flat = self.min_residual(support, None);
        flat < FEASIBLE || volts.is_some_and(|vs| self.min_residual(support, Some(vs)) < FEASIBLE)
    }

    /// Size of the smallest feasible support and every feasible subset of
    /// that size (bus indices, ascending).
    pub fn minimum_supports(&self, volts: Option<&[C64]>) -> (usize, Vec<Vec<usize>>) {
        for k in 0..=self.n {
            let found: Vec<Vec<usize>> = subsets(self.n, k)
                .into_iter()
                .filter(|s| self.feasible(s, volts))
                .collect();
            if !found.is_empty() {
                return (k, found);
            }
        }
        (usize::MAX, Vec::new())
    }

    /// Minimizer of `0.5 |n|^2 + c * sum |n_k|` over compensations supported
    /// on `support`, with the sign of every component taken from `sign`
    /// (`0.0` pins the component at zero). Solved as an equality-constrained
    /// problem by Newton's method on its optimality conditions.
    pub fn optimal_compensation(
        &self,
        support: &[usize],
        sign: &[(f64, f64)],
        c: f64,
        volts: &[C64],
    ) -> Option<Vec<C64>> {
        let zero: Vec<(usize, bool)> = support
            .iter()
            .zip(sign)
            .flat_map(|(&b, &(sr, si))| {
                let mut z = Vec::new();
                if sr == 0.0 {
                    z.push((b, true));
                }
                if si == 0.0 {
                    z.push((b, false));
                }
                z
            })
            .collect();
        let v = self.vars(support, &zero);
        let m = 2 * self.n;
        let dim = v.len + m;
        let mut weight = DVector::zeros(v.len);
        for (&b, &(sr, si)) in support.iter().zip(sign) {
            if let Some(k) = v.n_re[b] {
                weight[k] = c * sr;
            }
            if let Some(k) = v.n_im[b] {
                weight[k] = c * si;
            }
        }
        let is_n: Vec<bool> = (0..v.len)
            .map(|k| v.n_re.contains(&Some(k)) || v.n_im.contains(&Some(k)))
            .collect();
        let kkt = |w: &DVector<f64>| -> DVector<f64> {
            let z = w.rows(0, v.len).into_owned();
            let lam = w.rows(v.len, m).into_owned();
            let j = self.jacobian(&v, &z);
            let mut grad = j.transpose() * lam + &weight;
            for k in 0..v.len {
                if is_n[k] {
                    grad[k] += z[k];
                }
            }
            let mut out = DVector::zeros(dim);
            out.rows_mut(0, v.len).copy_from(&grad);
            out.rows_mut(v.len, m).copy_from(&self.residual(&v, &z));
            out
        };
        let mut w = DVector::zeros(dim);
        w.rows_mut(0, v.len).copy_from(&self.start(&v, Some(volts)));
        let mut f = kkt(&w);
        for _ in 0..60 {
            if f.amax() < 1e-10 {
                break;
            }
            let h = 1e-6;
            let mut jac = DMatrix::zeros(dim, dim);
            for col in 0..dim {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[col] += h;
                wm[col] -= h;
                jac.set_column(col, &((kkt(&wp) - kkt(&wm)) / (2.0 * h)));
            }
            // least-squares step: tolerates an undetermined multiplier
            let svd = jac.svd(true, true);
            let step = svd.solve(&(-&f), 1e-12).ok()?;
            w += step;
            f = kkt(&w);
        }
        if f.amax() > 1e-7 {
            return None;
        }
        let z = w.rows(0, v.len).into_owned();
        Some(self.compensation(&v, &z))
    }
}

/// All `k`-element subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}
