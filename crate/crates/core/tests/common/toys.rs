//! Hand-made and randomized small networks.

use std::fmt::Write;

use rand::Rng;

/// One 100 MW unit feeding a 50 MW load over a short, nearly lossless line.
pub const TWO_BUS: &str = r#"
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	230	1	1.1	0.9;
	2	1	50	10	0	0	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	50	0	300	-300	1	100	1	100	0;
];
mpc.branch = [
	1	2	0.0005	0.01	0	0	0	0	0	0	1	-360	360;
];
"#;

/// Load step giving -0.2 Hz on [`TWO_BUS`] under linear 4 % droop (MW).
pub const TWO_BUS_STEP_MW: f64 = 8.3333333333;

/// Meshed three-bus network with a single 100 MW unit.
pub const THREE_BUS: &str = r#"
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1.02	0	230	1	1.1	0.9;
	2	1	30	8	0	0	1	1	0	230	1	1.1	0.9;
	3	1	25	6	0	0	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	55	0	300	-300	1.02	100	1	100	0;
];
mpc.branch = [
	1	2	0.01	0.06	0.02	0	0	0	0	0	1	-360	360;
	2	3	0.02	0.09	0.01	0	0	0	0	0	1	-360	360;
	1	3	0.015	0.08	0.01	0	0	0	0	0	1	-360	360;
];
"#;

/// Disturbance applied to a generated toy.
#[derive(Debug, Clone, Copy)]
pub enum ToyEvent {
    Trip(usize),
    LoadStep { bus: i64, mw: f64 },
}

#[derive(Debug, Clone)]
pub struct Toy {
    pub text: String,
    pub event: ToyEvent,
}

/// Random connected network of 3 to 5 buses with one to three units.
pub fn random_toy(rng: &mut impl Rng) -> Toy {
    let n: usize = rng.gen_range(3..=5);
    let mut text = String::from("mpc.baseMVA = 100;\nmpc.bus = [\n");
    let mut loads = vec![(0.0, 0.0); n];
    for l in loads.iter_mut().skip(1) {
        *l = (rng.gen_range(10.0..60.0), rng.gen_range(0.0..20.0));
    }
    let n_gen = rng.gen_range(1..=3usize).min(n);
    let mut gen_bus = vec![1usize];
    while gen_bus.len() < n_gen {
        let b = rng.gen_range(2..=n);
        if !gen_bus.contains(&b) {
            gen_bus.push(b);
        }
    }
    for (i, (pd, qd)) in loads.iter().enumerate() {
        let id = i + 1;
        let kind = if id == 1 {
            3
        } else if gen_bus.contains(&id) {
            2
        } else {
            1
        };
        writeln!(
            text,
            "\t{id}\t{kind}\t{pd:.3}\t{qd:.3}\t0\t0\t1\t1\t0\t230\t1\t1.1\t0.9;"
        )
        .unwrap();
    }
    text.push_str("];\nmpc.gen = [\n");
    let total: f64 = loads.iter().map(|l| l.0).sum();
    let share: Vec<f64> = (0..n_gen).map(|_| rng.gen_range(0.5..1.5)).collect();
    let sum: f64 = share.iter().sum();
    for (g, &b) in gen_bus.iter().enumerate() {
        let pg = 1.02 * total * share[g] / sum;
        let pmax = pg * rng.gen_range(1.3..2.0);
        let vg = rng.gen_range(1.0..1.04);
        writeln!(
            text,
            "\t{b}\t{pg:.3}\t0\t300\t-300\t{vg:.4}\t100\t1\t{pmax:.3}\t0;"
        )
        .unwrap();
    }
    text.push_str("];\nmpc.branch = [\n");
    let mut edges = Vec::new();
    for i in 2..=n {
        edges.push((rng.gen_range(1..i), i));
    }
    for _ in 0..rng.gen_range(0..=2) {
        let a = rng.gen_range(1..=n);
        let b = rng.gen_range(1..=n);
        if a != b && !edges.contains(&(a.min(b), a.max(b))) {
            edges.push((a.min(b), a.max(b)));
        }
    }
    for (f, t) in edges {
        let r = rng.gen_range(0.005..0.03);
        let x = rng.gen_range(0.03..0.12);
        let bc = rng.gen_range(0.0..0.04);
        writeln!(
            text,
            "\t{f}\t{t}\t{r:.4}\t{x:.4}\t{bc:.4}\t0\t0\t0\t0\t0\t1\t-360\t360;"
        )
        .unwrap();
    }
    text.push_str("];\n");
    let event = if n_gen > 1 && rng.gen_bool(0.5) {
        ToyEvent::Trip(rng.gen_range(2..=n_gen))
    } else {
        let bus = rng.gen_range(2..=n) as i64;
        ToyEvent::LoadStep {
            bus,
            mw: rng.gen_range(0.05..0.25) * total,
        }
    };
    Toy { text, event }
}

/// Two units sharing a 55 MW load; the survivor of either trip stays well
/// inside its droop range.
pub const TWO_BUS_TWO_GEN: &str = r#"
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	230	1	1.1	0.9;
	2	2	55	10	0	0	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	30	0	300	-300	1	100	1	100	0;
	2	25	0	300	-300	1	100	1	100	0;
];
mpc.branch = [
	1	2	0.0005	0.01	0	0	0	0	0	0	1	-360	360;
];
"#;
