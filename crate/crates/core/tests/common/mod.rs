//! Shared fixtures and independent reference implementations for the
//! integration suites.
#![allow(dead_code, clippy::needless_range_loop)]

pub mod invariants;
pub mod oracle;
pub mod sparse;
pub mod toys;

use std::path::PathBuf;

use gridfreq_core::{parse_case, BusKind, NetworkCase};
use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
}

pub fn load_case(name: &str) -> NetworkCase {
    NetworkCase::load(data_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn case_text(name: &str) -> String {
    std::fs::read_to_string(data_path(name)).unwrap()
}

/// Textbook nodal admittance matrix straight from the raw case rows
/// (pi-model branches, off-nominal tap on the from side, bus shunts).
pub fn reference_ybus(text: &str) -> (Vec<i64>, DMatrix<C64>) {
    let raw = parse_case(text).unwrap();
    let mut ids: Vec<i64> = raw
        .buses
        .iter()
        .filter(|b| b.kind != BusKind::Isolated)
        .map(|b| b.id)
        .collect();
    ids.sort_unstable();
    let idx = |id: i64| ids.binary_search(&id).unwrap();
    let n = ids.len();
    let mut y = DMatrix::<C64>::zeros(n, n);
    for br in raw.branches.iter().filter(|b| b.status != 0.0) {
        let ys = C64::new(1.0, 0.0) / C64::new(br.r, br.x);
        let bc = C64::new(0.0, br.b / 2.0);
        let ratio = if br.tap == 0.0 { 1.0 } else { br.tap };
        let t = C64::from_polar(ratio, br.shift_deg.to_radians());
        let (f, k) = (idx(br.from), idx(br.to));
        y[(f, f)] += (ys + bc) / (ratio * ratio);
        y[(f, k)] += -ys / t.conj();
        y[(k, f)] += -ys / t;
        y[(k, k)] += ys + bc;
    }
    for b in raw.buses.iter().filter(|b| b.kind != BusKind::Isolated) {
        let i = idx(b.id);
        y[(i, i)] += C64::new(b.gs, b.bs) / raw.base_mva;
    }
    (ids, y)
}

pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
