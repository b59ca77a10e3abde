//! Rectangular current-mismatch network equations.
//!
//! Unknowns are ordered `[Vr_0, Vi_0, …, Vr_{n-1}, Vi_{n-1}, Q_reg…, P_var…, Δf]`
//! and rows `[KCL_re_0, KCL_im_0, …, |V|² rows, droop rows, slack angle]`.
//! In [`Formulation::Governor`] every in-service unit owns a droop adjustment
//! `ΔP_j` and `Δf` is global; in [`Formulation::PowerFlow`] a single free
//! active injection at the slack bus replaces droop and `Δf`.
//!
//! A device at bus `i` with net complex power `S = P + jQ` injects the current
//! `I = conj(S / V)`. Writing `u = 1 / conj(V)` makes
//! `I = conj(S)·u` holomorphic in `conj(V)`, which is how first and second
//! derivatives are formed below.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case_io::NetworkCase;
use crate::droop::DroopCurve;

/// Below this magnitude the injection current `conj(S/V)` is not evaluated.
pub const MIN_VOLTAGE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("voltage magnitude {magnitude:.3e} at bus {bus_id} is below {MIN_VOLTAGE:e}; the iterate has collapsed")]
    SingularInjection { bus_id: i64, magnitude: f64 },
    #[error("power flow needs an in-service generator at the slack bus")]
    NoSlackGenerator,
    #[error("{expected} droop curves required, {got} given")]
    CurveCount { expected: usize, got: usize },
    #[error("state vector has length {got}, layout expects {expected}")]
    Dimension { expected: usize, got: usize },
}

/// Bus admittance matrix, row-compressed, sorted by column.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    n: usize,
    rows: Vec<Vec<(usize, C64)>>,
}

impl AdmittanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[(usize, C64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        match self.rows[i].binary_search_by_key(&j, |e| e.0) {
            Ok(p) => self.rows[i][p].1,
            Err(_) => C64::new(0.0, 0.0),
        }
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// (Y V)_i
    pub fn current(&self, i: usize, v: &[C64]) -> C64 {
        self.rows[i].iter().map(|&(k, y)| y * v[k]).sum()
    }
}

/// Branch terminal admittances `(Yff, Yft, Ytf, Ytt)` in MATPOWER convention.
pub fn branch_admittances(br: &crate::case_io::Branch) -> (C64, C64, C64, C64) {
    let ys = C64::new(1.0, 0.0) / C64::new(br.r, br.x);
    let tap = C64::from_polar(br.tap, br.shift);
    let ytt = ys + C64::new(0.0, br.b / 2.0);
    let yff = ytt / (br.tap * br.tap);
    let yft = -ys / tap.conj();
    let ytf = -ys / tap;
    (yff, yft, ytf, ytt)
}

pub fn build_admittance(net: &NetworkCase) -> AdmittanceMatrix {
    let n = net.n_bus();
    let mut rows: Vec<std::collections::BTreeMap<usize, C64>> = vec![Default::default(); n];
    let mut add = |i: usize, j: usize, y: C64| {
        *rows[i].entry(j).or_insert(C64::new(0.0, 0.0)) += y;
    };
    for (i, b) in net.buses.iter().enumerate() {
        add(i, i, C64::new(b.gs, b.bs));
    }
    for br in &net.branches {
        let (yff, yft, ytf, ytt) = branch_admittances(br);
        add(br.from, br.from, yff);
        add(br.from, br.to, yft);
        add(br.to, br.from, ytf);
        add(br.to, br.to, ytt);
    }
    AdmittanceMatrix {
        n,
        rows: rows.into_iter().map(|r| r.into_iter().collect()).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Formulation {
    /// Classical power flow with a free slack-bus active injection.
    PowerFlow,
    /// Droop response of all units with a global frequency deviation.
    Governor,
}

/// Index bookkeeping for unknowns and residual rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub formulation: Formulation,
    pub n_bus: usize,
    /// Voltage-regulated buses, ascending.
    pub regulated: Vec<usize>,
    reg_slot: Vec<Option<usize>>,
    /// Bus of each active-power unknown.
    pub pvar_bus: Vec<usize>,
}

impl Layout {
    pub fn new(net: &NetworkCase, formulation: Formulation) -> Result<Self, ModelError> {
        let regulated = net.regulated_buses();
        let mut reg_slot = vec![None; net.n_bus()];
        for (k, &b) in regulated.iter().enumerate() {
            reg_slot[b] = Some(k);
        }
        let pvar_bus = match formulation {
            Formulation::Governor => net.gens.iter().map(|g| g.bus).collect(),
            Formulation::PowerFlow => {
                if !net.gens.iter().any(|g| g.bus == net.slack) {
                    return Err(ModelError::NoSlackGenerator);
                }
                vec![net.slack]
            }
        };
        Ok(Self {
            formulation,
            n_bus: net.n_bus(),
            regulated,
            reg_slot,
            pvar_bus,
        })
    }

    pub fn n_reg(&self) -> usize {
        self.regulated.len()
    }

    pub fn n_pvar(&self) -> usize {
        self.pvar_bus.len()
    }

    fn has_df(&self) -> bool {
        self.formulation == Formulation::Governor
    }

    pub fn n_unknowns(&self) -> usize {
        2 * self.n_bus + self.n_reg() + self.n_pvar() + usize::from(self.has_df())
    }

    pub fn n_rows(&self) -> usize {
        let droop = if self.has_df() { self.n_pvar() } else { 0 };
        2 * self.n_bus + self.n_reg() + droop + 1
    }

    pub fn vr(&self, i: usize) -> usize {
        2 * i
    }
    pub fn vi(&self, i: usize) -> usize {
        2 * i + 1
    }
    pub fn reg_slot(&self, bus: usize) -> Option<usize> {
        self.reg_slot[bus]
    }
    pub fn q(&self, slot: usize) -> usize {
        2 * self.n_bus + slot
    }
    pub fn p(&self, j: usize) -> usize {
        2 * self.n_bus + self.n_reg() + j
    }
    pub fn df(&self) -> Option<usize> {
        self.has_df()
            .then(|| 2 * self.n_bus + self.n_reg() + self.n_pvar())
    }
    pub fn mag_row(&self, slot: usize) -> usize {
        2 * self.n_bus + slot
    }
    pub fn droop_row(&self, j: usize) -> usize {
        2 * self.n_bus + self.n_reg() + j
    }
    pub fn angle_row(&self) -> usize {
        self.n_rows() - 1
    }

    /// Human-readable name of a residual row, for solver diagnostics.
    pub fn describe_row(&self, net: &NetworkCase, row: usize) -> String {
        if row < 2 * self.n_bus {
            let part = if row.is_multiple_of(2) {
                "real"
            } else {
                "imaginary"
            };
            format!("{part} KCL at bus {}", net.buses[row / 2].id)
        } else if row < 2 * self.n_bus + self.n_reg() {
            let bus = self.regulated[row - 2 * self.n_bus];
            format!("voltage magnitude at bus {}", net.buses[bus].id)
        } else if row == self.angle_row() {
            format!("slack angle at bus {}", net.buses[net.slack].id)
        } else {
            let j = row - 2 * self.n_bus - self.n_reg();
            match net.gens.get(j) {
                Some(g) => format!("droop of generator {} (bus {})", g.id, net.buses[g.bus].id),
                None => format!("row {row}"),
            }
        }
    }

    /// Human-readable name of an unknown.
    pub fn describe_unknown(&self, net: &NetworkCase, col: usize) -> String {
        if col < 2 * self.n_bus {
            let part = if col.is_multiple_of(2) { "Vr" } else { "Vi" };
            format!("{part} at bus {}", net.buses[col / 2].id)
        } else if col < 2 * self.n_bus + self.n_reg() {
            let bus = self.regulated[col - 2 * self.n_bus];
            format!("Q at bus {}", net.buses[bus].id)
        } else if Some(col) == self.df() {
            "frequency deviation".to_string()
        } else {
            let j = col - 2 * self.n_bus - self.n_reg();
            format!(
                "active power unknown {j} (bus {})",
                net.buses[self.pvar_bus[j]].id
            )
        }
    }
}

/// Solved or intermediate network state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemState {
    pub vre: Vec<f64>,
    pub vim: Vec<f64>,
    /// Reactive output of each voltage-regulated bus, in [`Layout::regulated`] order.
    pub q_reg: Vec<f64>,
    /// Governor: droop adjustment `ΔP_j` per in-service unit.
    /// Power flow: one entry, the slack bus active generation.
    pub dp: Vec<f64>,
    /// Frequency deviation, Hz. Zero in power-flow mode.
    pub df: f64,
}

impl SystemState {
    pub fn pack(&self, layout: &Layout) -> Vec<f64> {
        let mut x = vec![0.0; layout.n_unknowns()];
        for i in 0..layout.n_bus {
            x[layout.vr(i)] = self.vre[i];
            x[layout.vi(i)] = self.vim[i];
        }
        for (k, q) in self.q_reg.iter().enumerate() {
            x[layout.q(k)] = *q;
        }
        for (j, p) in self.dp.iter().enumerate() {
            x[layout.p(j)] = *p;
        }
        if let Some(d) = layout.df() {
            x[d] = self.df;
        }
        x
    }

    pub fn unpack(layout: &Layout, x: &[f64]) -> Self {
        let n = layout.n_bus;
        Self {
            vre: (0..n).map(|i| x[layout.vr(i)]).collect(),
            vim: (0..n).map(|i| x[layout.vi(i)]).collect(),
            q_reg: (0..layout.n_reg()).map(|k| x[layout.q(k)]).collect(),
            dp: (0..layout.n_pvar()).map(|j| x[layout.p(j)]).collect(),
            df: layout.df().map_or(0.0, |d| x[d]),
        }
    }

    pub fn voltage(&self, i: usize) -> C64 {
        C64::new(self.vre[i], self.vim[i])
    }

    pub fn voltages(&self) -> Vec<C64> {
        (0..self.vre.len()).map(|i| self.voltage(i)).collect()
    }

    /// Starting point from the voltage profile listed in the case. Regulated
    /// buses are scaled to their setpoint.
    pub fn from_case(net: &NetworkCase, layout: &Layout) -> Self {
        let n = net.n_bus();
        let mut vre = vec![0.0; n];
        let mut vim = vec![0.0; n];
        for (i, b) in net.buses.iter().enumerate() {
            let vm = match layout.reg_slot(i) {
                Some(_) => net.vset(i).unwrap_or(b.vm),
                None => b.vm,
            };
            vre[i] = vm * b.va.cos();
            vim[i] = vm * b.va.sin();
        }
        Self::with_voltages(net, layout, vre, vim)
    }

    /// Flat start at the slack angle; regulated buses at their setpoint.
    pub fn flat(net: &NetworkCase, layout: &Layout) -> Self {
        let n = net.n_bus();
        let (s, c) = net.slack_angle.sin_cos();
        let mut vre = vec![0.0; n];
        let mut vim = vec![0.0; n];
        for i in 0..n {
            let vm = match layout.reg_slot(i) {
                Some(_) => net.vset(i).unwrap_or(1.0),
                None => 1.0,
            };
            vre[i] = vm * c;
            vim[i] = vm * s;
        }
        Self::with_voltages(net, layout, vre, vim)
    }

    fn with_voltages(net: &NetworkCase, layout: &Layout, vre: Vec<f64>, vim: Vec<f64>) -> Self {
        let mut q_reg = vec![0.0; layout.n_reg()];
        for g in &net.gens {
            if let Some(k) = layout.reg_slot(g.bus) {
                q_reg[k] += g.qg;
            }
        }
        let dp = match layout.formulation {
            Formulation::Governor => vec![0.0; net.gens.len()],
            Formulation::PowerFlow => vec![net
                .gens
                .iter()
                .filter(|g| g.bus == net.slack)
                .map(|g| g.pg)
                .sum()],
        };
        Self {
            vre,
            vim,
            q_reg,
            dp,
            df: 0.0,
        }
    }

    /// Reactive output per in-service generator. Units sharing a regulated bus
    /// split its output evenly.
    pub fn gen_q(&self, net: &NetworkCase, layout: &Layout) -> Vec<f64> {
        let mut count = vec![0usize; net.n_bus()];
        for g in &net.gens {
            count[g.bus] += 1;
        }
        net.gens
            .iter()
            .map(|g| match layout.reg_slot(g.bus) {
                Some(k) => self.q_reg[k] / count[g.bus] as f64,
                None => g.qg,
            })
            .collect()
    }
}

/// Per-bus complex compensation current `n` (p.u.). The sparse solver also
/// carries the nonnegative split parts `re⁺, re⁻, im⁺, im⁻`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompensationVector {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub split: Option<SplitParts>,
    /// Components above this magnitude count towards the support.
    pub support_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitParts {
    pub re_pos: Vec<f64>,
    pub re_neg: Vec<f64>,
    pub im_pos: Vec<f64>,
    pub im_neg: Vec<f64>,
}

pub const DEFAULT_SUPPORT_THRESHOLD: f64 = 1e-4;

impl CompensationVector {
    pub fn zeros(n: usize) -> Self {
        Self {
            re: vec![0.0; n],
            im: vec![0.0; n],
            split: None,
            support_threshold: DEFAULT_SUPPORT_THRESHOLD,
        }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    /// Interleaved `[re_0, im_0, re_1, …]`, matching KCL row order.
    pub fn interleaved(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .flat_map(|(r, i)| [*r, *i])
            .collect()
    }

    pub fn from_interleaved(v: &[f64]) -> Self {
        Self {
            re: v.iter().step_by(2).copied().collect(),
            im: v.iter().skip(1).step_by(2).copied().collect(),
            split: None,
            support_threshold: DEFAULT_SUPPORT_THRESHOLD,
        }
    }

    pub fn magnitude(&self, i: usize) -> f64 {
        self.re[i].hypot(self.im[i])
    }

    /// Largest of `|n_re|` and `|n_im|` at bus `i`.
    pub fn component_max(&self, i: usize) -> f64 {
        self.re[i].abs().max(self.im[i].abs())
    }

    pub fn inf_norm(&self) -> f64 {
        (0..self.len()).fold(0.0, |m, i| m.max(self.component_max(i)))
    }

    pub fn l2_sq(&self) -> f64 {
        self.re.iter().chain(&self.im).map(|v| v * v).sum()
    }

    /// Σ_i c_i (|n_re,i| + |n_im,i|)
    pub fn weighted_l1(&self, weights: &[f64]) -> f64 {
        (0..self.len())
            .map(|i| weights[i] * (self.re[i].abs() + self.im[i].abs()))
            .sum()
    }

    /// Dense indices of buses whose compensation exceeds the threshold.
    pub fn support(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.component_max(i) > self.support_threshold)
            .collect()
    }
}

/// Network equations bound to one case, formulation and set of droop curves.
pub struct NetworkModel<'a> {
    pub net: &'a NetworkCase,
    pub y: &'a AdmittanceMatrix,
    pub layout: Layout,
    curves: &'a [DroopCurve],
    p_sched: Vec<f64>,
    q_sched: Vec<f64>,
    reg_vset: Vec<f64>,
    pvars_at: Vec<Vec<usize>>,
    slack_sin: f64,
    slack_cos: f64,
}

struct BusInjection {
    u: C64,
    u1: C64,
    u2: C64,
    sbar: C64,
}

impl<'a> NetworkModel<'a> {
    pub fn new(
        net: &'a NetworkCase,
        y: &'a AdmittanceMatrix,
        formulation: Formulation,
        curves: &'a [DroopCurve],
    ) -> Result<Self, ModelError> {
        let layout = Layout::new(net, formulation)?;
        if formulation == Formulation::Governor && curves.len() != net.gens.len() {
            return Err(ModelError::CurveCount {
                expected: net.gens.len(),
                got: curves.len(),
            });
        }
        let n = net.n_bus();
        let mut p_sched: Vec<f64> = net.buses.iter().map(|b| -b.pd).collect();
        let mut q_sched: Vec<f64> = net.buses.iter().map(|b| -b.qd).collect();
        for g in &net.gens {
            let replaced = formulation == Formulation::PowerFlow && g.bus == net.slack;
            if !replaced {
                p_sched[g.bus] += g.pg;
            }
            if layout.reg_slot(g.bus).is_none() {
                q_sched[g.bus] += g.qg;
            }
        }
        let reg_vset = layout
            .regulated
            .iter()
            .map(|&b| net.vset(b).unwrap_or(1.0))
            .collect();
        let mut pvars_at = vec![Vec::new(); n];
        for (j, &b) in layout.pvar_bus.iter().enumerate() {
            pvars_at[b].push(j);
        }
        let (slack_sin, slack_cos) = net.slack_angle.sin_cos();
        Ok(Self {
            net,
            y,
            layout,
            curves,
            p_sched,
            q_sched,
            reg_vset,
            pvars_at,
            slack_sin,
            slack_cos,
        })
    }

    pub fn curves(&self) -> &[DroopCurve] {
        self.curves
    }

    fn check_len(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.layout.n_unknowns() {
            return Err(ModelError::Dimension {
                expected: self.layout.n_unknowns(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn voltages(&self, x: &[f64]) -> Vec<C64> {
        (0..self.layout.n_bus)
            .map(|i| C64::new(x[self.layout.vr(i)], x[self.layout.vi(i)]))
            .collect()
    }

    /// Net complex power injection of all devices at bus `i`.
    pub fn bus_power(&self, x: &[f64], i: usize) -> C64 {
        let mut p = self.p_sched[i];
        for &j in &self.pvars_at[i] {
            p += x[self.layout.p(j)];
        }
        let mut q = self.q_sched[i];
        if let Some(k) = self.layout.reg_slot(i) {
            q += x[self.layout.q(k)];
        }
        C64::new(p, q)
    }

    fn injection(&self, x: &[f64], v: &[C64], i: usize) -> Result<BusInjection, ModelError> {
        let mag = v[i].norm();
        if mag < MIN_VOLTAGE {
            return Err(ModelError::SingularInjection {
                bus_id: self.net.buses[i].id,
                magnitude: mag,
            });
        }
        let u = C64::new(1.0, 0.0) / v[i].conj();
        Ok(BusInjection {
            u,
            u1: -u * u,
            u2: 2.0 * u * u * u,
            sbar: self.bus_power(x, i).conj(),
        })
    }

    /// Residual of every row. `n` is interleaved (`[re_0, im_0, …]`) or empty for zero.
    pub fn residual(&self, x: &[f64], n: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_len(x)?;
        let l = &self.layout;
        let v = self.voltages(x);
        let mut r = vec![0.0; l.n_rows()];
        for i in 0..l.n_bus {
            let inj = self.injection(x, &v, i)?;
            let mut g = self.y.current(i, &v) - inj.sbar * inj.u;
            if !n.is_empty() {
                g += C64::new(n[2 * i], n[2 * i + 1]);
            }
            r[2 * i] = g.re;
            r[2 * i + 1] = g.im;
        }
        for (k, &b) in l.regulated.iter().enumerate() {
            r[l.mag_row(k)] = v[b].norm_sqr() - self.reg_vset[k] * self.reg_vset[k];
        }
        if let Some(d) = l.df() {
            let df = x[d];
            for (j, curve) in self.curves.iter().enumerate() {
                r[l.droop_row(j)] = x[l.p(j)] - curve.eval(df);
            }
        }
        let s = v[self.net.slack];
        r[l.angle_row()] = s.im * self.slack_cos - s.re * self.slack_sin;
        Ok(r)
    }

    /// Jacobian of [`Self::residual`] with respect to the unknowns, as
    /// triplets. The pattern depends only on the network and formulation.
    pub fn jacobian(&self, x: &[f64]) -> Result<Vec<(usize, usize, f64)>, ModelError> {
        self.check_len(x)?;
        let l = &self.layout;
        let v = self.voltages(x);
        let mut t = Vec::with_capacity(4 * self.y.nnz() + 8 * l.n_bus);
        for i in 0..l.n_bus {
            let (re, im) = (2 * i, 2 * i + 1);
            for &(k, y) in self.y.row(i) {
                t.push((re, l.vr(k), y.re));
                t.push((re, l.vi(k), -y.im));
                t.push((im, l.vr(k), y.im));
                t.push((im, l.vi(k), y.re));
            }
            let inj = self.injection(x, &v, i)?;
            let d_vr = inj.sbar * inj.u1;
            let d_vi = C64::new(0.0, -1.0) * inj.sbar * inj.u1;
            t.push((re, l.vr(i), -d_vr.re));
            t.push((re, l.vi(i), -d_vi.re));
            t.push((im, l.vr(i), -d_vr.im));
            t.push((im, l.vi(i), -d_vi.im));
            if let Some(k) = l.reg_slot(i) {
                let d_q = C64::new(0.0, -1.0) * inj.u;
                t.push((re, l.q(k), -d_q.re));
                t.push((im, l.q(k), -d_q.im));
            }
            for &j in &self.pvars_at[i] {
                t.push((re, l.p(j), -inj.u.re));
                t.push((im, l.p(j), -inj.u.im));
            }
        }
        for (k, &b) in l.regulated.iter().enumerate() {
            t.push((l.mag_row(k), l.vr(b), 2.0 * v[b].re));
            t.push((l.mag_row(k), l.vi(b), 2.0 * v[b].im));
        }
        if let Some(d) = l.df() {
            let df = x[d];
            for (j, curve) in self.curves.iter().enumerate() {
                t.push((l.droop_row(j), l.p(j), 1.0));
                t.push((l.droop_row(j), d, -curve.derivative(df)));
            }
        }
        let s = self.net.slack;
        t.push((l.angle_row(), l.vr(s), -self.slack_sin));
        t.push((l.angle_row(), l.vi(s), self.slack_cos));
        Ok(t)
    }

    /// Hessian of `Σ_r m_r·residual_r(x)` with respect to the unknowns, as
    /// symmetric triplets (both triangles).
    pub fn hessian(&self, x: &[f64], m: &[f64]) -> Result<Vec<(usize, usize, f64)>, ModelError> {
        self.check_len(x)?;
        let l = &self.layout;
        let v = self.voltages(x);
        let mj = C64::new(0.0, -1.0);
        let mut t = Vec::with_capacity(16 * l.n_bus);
        let sym = |t: &mut Vec<(usize, usize, f64)>, a: usize, b: usize, val: f64| {
            t.push((a, b, val));
            if a != b {
                t.push((b, a, val));
            }
        };
        for i in 0..l.n_bus {
            let inj = self.injection(x, &v, i)?;
            let lam = C64::new(m[2 * i], m[2 * i + 1]).conj();
            // -Re(conj(Λ)·∂²I)
            let h = |d: C64| -(lam * d).re;
            let (vr, vi) = (l.vr(i), l.vi(i));
            let su2 = inj.sbar * inj.u2;
            let mut hrr = h(su2);
            let hri = h(mj * su2);
            let mut hii = h(-su2);
            if let Some(k) = l.reg_slot(i) {
                let mk = m[l.mag_row(k)];
                hrr += 2.0 * mk;
                hii += 2.0 * mk;
                sym(&mut t, vr, l.q(k), h(mj * inj.u1));
                sym(&mut t, vi, l.q(k), h(-inj.u1));
            }
            sym(&mut t, vr, vr, hrr);
            sym(&mut t, vr, vi, hri);
            sym(&mut t, vi, vi, hii);
            for &j in &self.pvars_at[i] {
                sym(&mut t, vr, l.p(j), h(inj.u1));
                sym(&mut t, vi, l.p(j), h(mj * inj.u1));
            }
        }
        if let Some(d) = l.df() {
            let df = x[d];
            let hff: f64 = self
                .curves
                .iter()
                .enumerate()
                .map(|(j, c)| -m[l.droop_row(j)] * c.second_derivative(df))
                .sum();
            t.push((d, d, hff));
        }
        Ok(t)
    }
}

/// KCL residual of [`NetworkModel::residual`] for a state and compensation.
pub fn kcl_residual(
    model: &NetworkModel<'_>,
    state: &SystemState,
    n: &CompensationVector,
) -> Result<Vec<f64>, ModelError> {
    model.residual(&state.pack(&model.layout), &n.interleaved())
}

/// Analytic Jacobian of [`kcl_residual`] as triplets.
pub fn kcl_jacobian(
    model: &NetworkModel<'_>,
    state: &SystemState,
) -> Result<Vec<(usize, usize, f64)>, ModelError> {
    model.jacobian(&state.pack(&model.layout))
}

/// Complex power flowing into each end of every in-service branch.
pub fn branch_flows(net: &NetworkCase, state: &SystemState) -> Vec<(C64, C64)> {
    net.branches
        .iter()
        .map(|br| {
            let (yff, yft, ytf, ytt) = branch_admittances(br);
            let vf = state.voltage(br.from);
            let vt = state.voltage(br.to);
            let i_f = yff * vf + yft * vt;
            let i_t = ytf * vf + ytt * vt;
            (vf * i_f.conj(), vt * i_t.conj())
        })
        .collect()
}

/// Total active losses: series/charging losses of branches plus bus shunt
/// consumption.
pub fn active_losses(net: &NetworkCase, state: &SystemState) -> f64 {
    let branches: f64 = branch_flows(net, state)
        .iter()
        .map(|(sf, st)| sf.re + st.re)
        .sum();
    let shunts: f64 = net
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| b.gs * state.voltage(i).norm_sqr())
        .sum();
    branches + shunts
}

/// Generation (scheduled plus droop) minus load minus losses, p.u.
pub fn power_balance(model: &NetworkModel<'_>, state: &SystemState) -> f64 {
    let x = state.pack(&model.layout);
    let injected: f64 = (0..model.layout.n_bus)
        .map(|i| model.bus_power(&x, i).re)
        .sum();
    injected - active_losses(model.net, state)
}
