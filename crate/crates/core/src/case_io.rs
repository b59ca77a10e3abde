//! MATPOWER case ingestion.
//!
//! [`parse_case`] reads the `baseMVA`, `bus`, `gen` and `branch` matrices of a
//! MATPOWER `.m` case (version 1 or 2 layout, with or without the `mpc.`
//! prefix). [`build_network`] turns the raw rows into a per-unit
//! [`NetworkCase`] with a dense bus indexing sorted by external bus id.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUS_COLS: usize = 13;
const GEN_COLS: usize = 10;
const BRANCH_COLS: usize = 11;

/// Default nominal system frequency in Hz.
pub const DEFAULT_F_NOMINAL: f64 = 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaseError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("malformed case: {0}")]
    Structure(String),
    #[error("invalid network model: {0}")]
    Model(String),
    #[error("contingency: {0}")]
    Contingency(String),
    #[error("reading {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BusKind {
    Pq,
    Pv,
    Slack,
    Isolated,
}

impl BusKind {
    fn from_code(code: f64, line: usize) -> Result<Self, CaseError> {
        match code as i64 {
            1 => Ok(BusKind::Pq),
            2 => Ok(BusKind::Pv),
            3 => Ok(BusKind::Slack),
            4 => Ok(BusKind::Isolated),
            other => Err(CaseError::Parse {
                line,
                msg: format!("unknown bus type {other}"),
            }),
        }
    }
}

/// Generator identifier: the 1-based row of the unit in the case's `gen` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GenId(pub usize);

impl fmt::Display for GenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawBus {
    pub id: i64,
    pub kind: BusKind,
    pub pd: f64,
    pub qd: f64,
    pub gs: f64,
    pub bs: f64,
    pub vm: f64,
    pub va_deg: f64,
    pub base_kv: f64,
    pub vmax: f64,
    pub vmin: f64,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawGen {
    pub bus: i64,
    pub pg: f64,
    pub qg: f64,
    pub qmax: f64,
    pub qmin: f64,
    pub vg: f64,
    pub mbase: f64,
    pub status: f64,
    pub pmax: f64,
    pub pmin: f64,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawBranch {
    pub from: i64,
    pub to: i64,
    pub r: f64,
    pub x: f64,
    pub b: f64,
    pub tap: f64,
    pub shift_deg: f64,
    pub status: f64,
    pub line: usize,
}

/// Rows of a case exactly as written, in MW/MVAr/degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCase {
    pub base_mva: f64,
    pub buses: Vec<RawBus>,
    pub gens: Vec<RawGen>,
    pub branches: Vec<RawBranch>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bus {
    /// External bus number from the case file.
    pub id: i64,
    pub kind: BusKind,
    pub pd: f64,
    pub qd: f64,
    pub gs: f64,
    pub bs: f64,
    pub vm: f64,
    /// Voltage angle in radians.
    pub va: f64,
    pub base_kv: f64,
    pub vmin: f64,
    pub vmax: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Generator {
    pub id: GenId,
    /// Dense bus index.
    pub bus: usize,
    pub pg: f64,
    pub qg: f64,
    /// Reactive limits are carried as metadata only.
    pub qmax: f64,
    pub qmin: f64,
    pub vset: f64,
    pub mbase: f64,
    pub pmax: f64,
    pub pmin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub b: f64,
    pub tap: f64,
    /// Phase shift in radians.
    pub shift: f64,
}

/// Record of the disturbance applied to a base case.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Disturbance {
    GeneratorOutage {
        gen: GenId,
        bus_id: i64,
        mw_lost: f64,
    },
    LoadStep {
        bus_id: i64,
        mw: f64,
        mvar: f64,
    },
}

/// Validated per-unit network on `base_mva`. Only in-service devices are kept.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkCase {
    pub base_mva: f64,
    pub f_nominal: f64,
    pub buses: Vec<Bus>,
    pub gens: Vec<Generator>,
    pub branches: Vec<Branch>,
    pub slack: usize,
    pub slack_angle: f64,
    pub disturbances: Vec<Disturbance>,
}

fn strip_comment(line: &str) -> &str {
    let mut in_quote = false;
    for (i, c) in line.char_indices() {
        match c {
            '\'' => in_quote = !in_quote,
            '%' if !in_quote => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Field name of an assignment: `mpc.bus = [` gives `bus`.
fn assignment_target(lhs: &str) -> &str {
    let lhs = lhs.trim();
    match lhs.rfind('.') {
        Some(dot) => &lhs[dot + 1..],
        None => lhs,
    }
}

fn parse_value(tok: &str, line: usize) -> Result<f64, CaseError> {
    let lower = tok.to_ascii_lowercase();
    let parsed = match lower.as_str() {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => lower.parse::<f64>(),
    };
    parsed.map_err(|_| CaseError::Parse {
        line,
        msg: format!("invalid number `{tok}`"),
    })
}

struct MatrixRows {
    rows: Vec<(usize, Vec<f64>)>,
}

fn collect_matrix(
    name: &str,
    first_line: usize,
    body_start: &str,
    lines: &mut std::iter::Peekable<impl Iterator<Item = (usize, String)>>,
    min_cols: usize,
) -> Result<MatrixRows, CaseError> {
    let mut rows = Vec::new();
    let mut width: Option<usize> = None;
    let mut pending: Vec<(usize, String)> = vec![(first_line, body_start.to_string())];
    let mut closed = false;
    loop {
        for (lineno, text) in pending.drain(..) {
            let (content, ends) = match text.find(']') {
                Some(pos) => (text[..pos].to_string(), true),
                None => (text, false),
            };
            for row in content.split(';') {
                let toks: Vec<&str> = row
                    .split(|c: char| c.is_whitespace() || c == ',')
                    .filter(|t| !t.is_empty())
                    .collect();
                if toks.is_empty() {
                    continue;
                }
                let vals = toks
                    .iter()
                    .map(|t| parse_value(t, lineno))
                    .collect::<Result<Vec<_>, _>>()?;
                if vals.len() < min_cols {
                    return Err(CaseError::Parse {
                        line: lineno,
                        msg: format!(
                            "`{name}` row has {} columns, at least {min_cols} required",
                            vals.len()
                        ),
                    });
                }
                match width {
                    None => width = Some(vals.len()),
                    Some(w) if w != vals.len() => {
                        return Err(CaseError::Parse {
                            line: lineno,
                            msg: format!(
                                "`{name}` row has {} columns, previous rows have {w}",
                                vals.len()
                            ),
                        })
                    }
                    _ => {}
                }
                rows.push((lineno, vals));
            }
            if ends {
                closed = true;
                break;
            }
        }
        if closed {
            break;
        }
        match lines.next() {
            Some(next) => pending.push(next),
            None => {
                return Err(CaseError::Parse {
                    line: first_line,
                    msg: format!("`{name}` matrix is not closed"),
                })
            }
        }
    }
    Ok(MatrixRows { rows })
}

/// Parse MATPOWER case text.
pub fn parse_case(text: &str) -> Result<RawCase, CaseError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, strip_comment(l).to_string()))
        .peekable();

    let mut base_mva = None;
    let mut bus = None;
    let mut gen = None;
    let mut branch = None;

    while let Some((lineno, line)) = lines.next() {
        let Some(eq) = line.find('=') else { continue };
        let target = assignment_target(&line[..eq]);
        let rhs = line[eq + 1..].trim();
        match target {
            "baseMVA" => {
                let num = rhs.trim_end_matches(';').trim();
                base_mva = Some(parse_value(num, lineno)?);
            }
            "bus" | "gen" | "branch" => {
                let Some(body) = rhs.strip_prefix('[') else {
                    return Err(CaseError::Parse {
                        line: lineno,
                        msg: format!("expected `[` after `{target} =`"),
                    });
                };
                let min_cols = match target {
                    "bus" => BUS_COLS,
                    "gen" => GEN_COLS,
                    _ => BRANCH_COLS,
                };
                let m = collect_matrix(target, lineno, body, &mut lines, min_cols)?;
                match target {
                    "bus" => bus = Some(m),
                    "gen" => gen = Some(m),
                    _ => branch = Some(m),
                }
            }
            _ => {}
        }
    }

    let base_mva = base_mva.ok_or_else(|| CaseError::Structure("missing `baseMVA`".into()))?;
    let bus = bus.ok_or_else(|| CaseError::Structure("missing `bus` matrix".into()))?;
    let gen = gen.ok_or_else(|| CaseError::Structure("missing `gen` matrix".into()))?;
    let branch = branch.ok_or_else(|| CaseError::Structure("missing `branch` matrix".into()))?;

    let buses = bus
        .rows
        .into_iter()
        .map(|(line, r)| {
            Ok(RawBus {
                id: r[0] as i64,
                kind: BusKind::from_code(r[1], line)?,
                pd: r[2],
                qd: r[3],
                gs: r[4],
                bs: r[5],
                vm: r[7],
                va_deg: r[8],
                base_kv: r[9],
                vmax: r[11],
                vmin: r[12],
                line,
            })
        })
        .collect::<Result<Vec<_>, CaseError>>()?;
    let gens = gen
        .rows
        .into_iter()
        .map(|(line, r)| RawGen {
            bus: r[0] as i64,
            pg: r[1],
            qg: r[2],
            qmax: r[3],
            qmin: r[4],
            vg: r[5],
            mbase: r[6],
            status: r[7],
            pmax: r[8],
            pmin: r[9],
            line,
        })
        .collect();
    let branches = branch
        .rows
        .into_iter()
        .map(|(line, r)| RawBranch {
            from: r[0] as i64,
            to: r[1] as i64,
            r: r[2],
            x: r[3],
            b: r[4],
            tap: r[8],
            shift_deg: r[9],
            status: r[10],
            line,
        })
        .collect();

    let raw = RawCase {
        base_mva,
        buses,
        gens,
        branches,
    };
    raw.validate()?;
    Ok(raw)
}

impl RawCase {
    fn validate(&self) -> Result<(), CaseError> {
        if !(self.base_mva > 0.0) {
            return Err(CaseError::Structure(format!(
                "baseMVA must be positive, got {}",
                self.base_mva
            )));
        }
        if self.buses.is_empty() {
            return Err(CaseError::Structure("no buses".into()));
        }
        if self.gens.is_empty() {
            return Err(CaseError::Structure("no generators".into()));
        }
        let slack_count = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        if slack_count != 1 {
            return Err(CaseError::Structure(format!(
                "expected exactly one slack bus, found {slack_count}"
            )));
        }
        let ids: HashSet<i64> = self.buses.iter().map(|b| b.id).collect();
        for g in &self.gens {
            if !ids.contains(&g.bus) {
                return Err(CaseError::Parse {
                    line: g.line,
                    msg: format!("generator references unknown bus {}", g.bus),
                });
            }
        }
        for br in &self.branches {
            for end in [br.from, br.to] {
                if !ids.contains(&end) {
                    return Err(CaseError::Parse {
                        line: br.line,
                        msg: format!("branch references unknown bus {end}"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Convert raw rows into a per-unit network, dropping out-of-service devices.
pub fn build_network(raw: &RawCase) -> Result<NetworkCase, CaseError> {
    let base = raw.base_mva;

    let mut by_id: BTreeMap<i64, &RawBus> = BTreeMap::new();
    for b in &raw.buses {
        if by_id.insert(b.id, b).is_some() {
            return Err(CaseError::Model(format!("duplicate bus id {}", b.id)));
        }
    }
    let live: Vec<&RawBus> = by_id
        .values()
        .copied()
        .filter(|b| b.kind != BusKind::Isolated)
        .collect();
    let index: BTreeMap<i64, usize> = live.iter().enumerate().map(|(i, b)| (b.id, i)).collect();

    let buses: Vec<Bus> = live
        .iter()
        .map(|b| Bus {
            id: b.id,
            kind: b.kind,
            pd: b.pd / base,
            qd: b.qd / base,
            gs: b.gs / base,
            bs: b.bs / base,
            vm: if b.vm > 0.0 { b.vm } else { 1.0 },
            va: b.va_deg * PI / 180.0,
            base_kv: b.base_kv,
            vmin: b.vmin,
            vmax: b.vmax,
        })
        .collect();

    let mut gens = Vec::new();
    for (row, g) in raw.gens.iter().enumerate() {
        if g.status <= 0.0 {
            continue;
        }
        let Some(&bus) = index.get(&g.bus) else {
            // in-service unit on an isolated bus cannot contribute
            continue;
        };
        gens.push(Generator {
            id: GenId(row + 1),
            bus,
            pg: g.pg / base,
            qg: g.qg / base,
            qmax: g.qmax / base,
            qmin: g.qmin / base,
            vset: g.vg,
            mbase: g.mbase / base,
            pmax: g.pmax / base,
            pmin: g.pmin / base,
        });
    }
    if gens.is_empty() {
        return Err(CaseError::Model("no in-service generator".into()));
    }

    let mut branches = Vec::new();
    for br in &raw.branches {
        if br.status <= 0.0 {
            continue;
        }
        let (Some(&from), Some(&to)) = (index.get(&br.from), index.get(&br.to)) else {
            return Err(CaseError::Model(format!(
                "in-service branch {}-{} touches an isolated bus (line {})",
                br.from, br.to, br.line
            )));
        };
        if br.r == 0.0 && br.x == 0.0 {
            return Err(CaseError::Model(format!(
                "zero-impedance branch {}-{} (line {})",
                br.from, br.to, br.line
            )));
        }
        branches.push(Branch {
            from,
            to,
            r: br.r,
            x: br.x,
            b: br.b,
            tap: if br.tap == 0.0 { 1.0 } else { br.tap },
            shift: br.shift_deg * PI / 180.0,
        });
    }

    let slack = buses
        .iter()
        .position(|b| b.kind == BusKind::Slack)
        .ok_or_else(|| CaseError::Model("slack bus is isolated".into()))?;
    let slack_angle = buses[slack].va;

    let net = NetworkCase {
        base_mva: base,
        f_nominal: DEFAULT_F_NOMINAL,
        buses,
        gens,
        branches,
        slack,
        slack_angle,
        disturbances: Vec::new(),
    };
    net.check_connected()?;
    Ok(net)
}

impl NetworkCase {
    /// Parse and build in one go.
    pub fn from_text(text: &str) -> Result<Self, CaseError> {
        build_network(&parse_case(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CaseError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CaseError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_text(&text)
    }

    pub fn with_nominal_frequency(mut self, f_nominal: f64) -> Self {
        self.f_nominal = f_nominal;
        self
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn bus_index(&self, id: i64) -> Option<usize> {
        self.buses.binary_search_by_key(&id, |b| b.id).ok()
    }

    pub fn gen_position(&self, id: GenId) -> Option<usize> {
        self.gens.iter().position(|g| g.id == id)
    }

    /// Buses whose voltage magnitude is held by in-service generators, ascending.
    pub fn regulated_buses(&self) -> Vec<usize> {
        let mut has_gen = vec![false; self.n_bus()];
        for g in &self.gens {
            has_gen[g.bus] = true;
        }
        (0..self.n_bus())
            .filter(|&i| has_gen[i] && matches!(self.buses[i].kind, BusKind::Pv | BusKind::Slack))
            .collect()
    }

    /// Voltage setpoint of a regulated bus: the first in-service unit's setpoint.
    pub fn vset(&self, bus: usize) -> Option<f64> {
        self.gens.iter().find(|g| g.bus == bus).map(|g| g.vset)
    }

    pub fn total_load_mw(&self) -> f64 {
        self.buses.iter().map(|b| b.pd).sum::<f64>() * self.base_mva
    }

    /// Megawatts lost by the most recent generator outage, if any.
    pub fn mw_lost(&self) -> f64 {
        self.disturbances
            .iter()
            .map(|d| match d {
                Disturbance::GeneratorOutage { mw_lost, .. } => *mw_lost,
                Disturbance::LoadStep { mw, .. } => *mw,
            })
            .fold(0.0, |a, b| a + b)
    }

    /// In-service unit with the largest scheduled output; ties go to the lower bus id.
    pub fn largest_generator(&self) -> Option<GenId> {
        let mut order: Vec<&Generator> = self.gens.iter().collect();
        order.sort_by(|a, b| {
            b.pg.total_cmp(&a.pg)
                .then(self.buses[a.bus].id.cmp(&self.buses[b.bus].id))
                .then(a.id.cmp(&b.id))
        });
        order.first().map(|g| g.id)
    }

    /// Copy of the network with one generator taken out of service.
    pub fn apply_contingency(&self, outage: GenId) -> Result<NetworkCase, CaseError> {
        let pos = self.gen_position(outage).ok_or_else(|| {
            CaseError::Contingency(format!("generator {outage} is not in service"))
        })?;
        if self.gens.len() == 1 {
            return Err(CaseError::Contingency(format!(
                "generator {outage} is the only in-service unit; no frequency-responsive resource would remain"
            )));
        }
        let mut net = self.clone();
        let g = net.gens.remove(pos);
        net.disturbances.push(Disturbance::GeneratorOutage {
            gen: g.id,
            bus_id: self.buses[g.bus].id,
            mw_lost: g.pg * self.base_mva,
        });
        Ok(net)
    }

    /// Copy of the network with additional constant-power load at one bus.
    pub fn apply_load_step(
        &self,
        bus_id: i64,
        mw: f64,
        mvar: f64,
    ) -> Result<NetworkCase, CaseError> {
        let idx = self
            .bus_index(bus_id)
            .ok_or_else(|| CaseError::Contingency(format!("unknown bus {bus_id}")))?;
        let mut net = self.clone();
        net.buses[idx].pd += mw / self.base_mva;
        net.buses[idx].qd += mvar / self.base_mva;
        net.disturbances
            .push(Disturbance::LoadStep { bus_id, mw, mvar });
        Ok(net)
    }

    fn check_connected(&self) -> Result<(), CaseError> {
        let n = self.n_bus();
        let mut adj = vec![Vec::new(); n];
        for br in &self.branches {
            adj[br.from].push(br.to);
            adj[br.to].push(br.from);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([self.slack]);
        seen[self.slack] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        let stranded: Vec<i64> = (0..n)
            .filter(|&i| !seen[i])
            .map(|i| self.buses[i].id)
            .collect();
        if stranded.is_empty() {
            Ok(())
        } else {
            Err(CaseError::Model(format!(
                "network is islanded: {} bus(es) not connected to the slack, first {}",
                stranded.len(),
                stranded[0]
            )))
        }
    }
}
