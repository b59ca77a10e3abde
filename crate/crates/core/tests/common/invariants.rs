//! Numerical invariants shared by the model suite and the acceptance run.

use std::collections::BTreeSet;

use gridfreq_core::network::{
    active_losses, build_admittance, power_balance, Formulation, NetworkModel,
};
use gridfreq_core::{solve_gpf, DroopCurve, NetworkCase, SolverConfig, SystemState};
use num_complex::Complex64 as C64;
use rand::Rng;

use super::rng;

pub fn random_state(r: &mut impl Rng, net: &NetworkCase, model: &NetworkModel<'_>) -> Vec<f64> {
    let mut s = SystemState::from_case(net, &model.layout);
    for i in 0..net.n_bus() {
        s.vre[i] += r.gen_range(-0.05..0.05);
        s.vim[i] += r.gen_range(-0.05..0.05);
    }
    for q in &mut s.q_reg {
        *q = r.gen_range(-0.5..0.5);
    }
    for p in &mut s.dp {
        *p = r.gen_range(-0.3..0.3);
    }
    if model.layout.df().is_some() {
        s.df = r.gen_range(-1.5..0.5);
    }
    s.pack(&model.layout)
}

pub fn dense_triplets(t: &[(usize, usize, f64)], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let mut d = vec![vec![0.0; cols]; rows];
    for &(i, j, v) in t {
        d[i][j] += v;
    }
    d
}

pub fn check_jacobian(
    name: &str,
    net: &NetworkCase,
    curves: &[DroopCurve],
    formulation: Formulation,
    seed: u64,
) {
    let y = build_admittance(net);
    let model = NetworkModel::new(net, &y, formulation, curves).unwrap();
    let (rows, cols) = (model.layout.n_rows(), model.layout.n_unknowns());
    let mut r = rng(seed);
    let h = 1e-6;
    let mut pattern: Option<BTreeSet<(usize, usize)>> = None;
    for k in 0..20 {
        let x = random_state(&mut r, net, &model);
        let jt = model.jacobian(&x).unwrap();
        let pat: BTreeSet<(usize, usize)> = jt.iter().map(|&(i, j, _)| (i, j)).collect();
        match &pattern {
            None => pattern = Some(pat),
            Some(p) => assert_eq!(p, &pat, "{name}: sparsity pattern changed"),
        }
        // column-wise comparison keeps memory linear for the large cases
        let mut by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); cols];
        for &(i, j, v) in &jt {
            by_col[j].push((i, v));
        }
        for (c, entries) in by_col.iter().enumerate() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let rp = model.residual(&xp, &[]).unwrap();
            let rm = model.residual(&xm, &[]).unwrap();
            let mut analytic = vec![0.0; rows];
            for &(i, v) in entries {
                analytic[i] += v;
            }
            let mut scale: f64 = 1.0;
            let mut err: f64 = 0.0;
            for i in 0..rows {
                let fd = (rp[i] - rm[i]) / (2.0 * h);
                scale = scale.max(fd.abs());
                err = err.max((fd - analytic[i]).abs());
            }
            assert!(
                err <= 1e-5 * scale,
                "{name} state {k}: column {} off by {err:e} (scale {scale:e})",
                model.layout.describe_unknown(net, c)
            );
        }
    }
}

/// Generation minus load minus losses, corrected for the power delivered by
/// the compensation currents.
pub fn conservation_gap(net: &NetworkCase, c: &[DroopCurve], cfg: &SolverConfig) -> Option<f64> {
    let sol = solve_gpf(net, c, cfg).ok()?;
    if !sol.converged {
        return None;
    }
    let y = build_admittance(net);
    let model = NetworkModel::new(net, &y, Formulation::Governor, c).unwrap();
    let injected_by_n: f64 = (0..net.n_bus())
        .map(|i| (sol.state.voltage(i) * C64::new(sol.n.re[i], sol.n.im[i]).conj()).re)
        .sum();
    let gap = power_balance(&model, &sol.state) - injected_by_n;
    assert!(active_losses(net, &sol.state) > 0.0);
    Some(gap)
}
