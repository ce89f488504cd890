//! Network data model, MATPOWER-subset case parsing, validation and
//! per-unit conversion.
//!
//! The parser accepts the small slice of the MATPOWER `.m` format needed
//! for radial feeder studies: the `baseMVA` scalar and the `bus`, `gen`
//! and `branch` matrices. Anything else (`gencost`, `dcline`, tap-changing
//! transformers, out-of-service branches) is rejected with a clear error
//! rather than silently ignored.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bus identifier as it appears in the case file (1-based, not contiguous
/// in general).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BusId(pub u32);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Slack,
    Pq,
}

/// One bus of the feeder. Loads and shunts are stored in physical units
/// (MW / MVar at 1 p.u. voltage); conversion to per unit happens against
/// [`Network::base_mva`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
    pub p_load_mw: f64,
    pub q_load_mvar: f64,
    pub g_shunt_mw: f64,
    pub b_shunt_mvar: f64,
    pub base_kv: f64,
    /// Voltage setpoint in p.u.; meaningful for the slack bus only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_set: Option<f64>,
}

impl Bus {
    pub fn p_load_pu(&self, base_mva: f64) -> f64 {
        self.p_load_mw / base_mva
    }

    pub fn q_load_pu(&self, base_mva: f64) -> f64 {
        self.q_load_mvar / base_mva
    }
}

/// A series branch between two buses, impedance in per unit on the system
/// MVA base. `b_charging_pu` is the total line charging susceptance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from_bus: BusId,
    pub to_bus: BusId,
    pub r_pu: f64,
    pub x_pu: f64,
    pub b_charging_pu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating_mva: Option<f64>,
}

/// Immutable feeder model. Construct via [`parse_matpower_case`],
/// [`Network::from_json`] or by hand (then run [`validate_network`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    /// System peak active demand in MW; must equal the sum of bus loads.
    pub peak_load_mw: f64,
}

impl Network {
    /// Position of the (single) slack bus in `buses`.
    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated network has a slack bus")
    }

    pub fn index_of(&self, id: BusId) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Slack voltage setpoint in p.u. (defaults to 1.03 when the case file
    /// does not carry one).
    pub fn slack_voltage(&self) -> f64 {
        self.buses[self.slack_index()].v_set.unwrap_or(DEFAULT_PCC_VOLTAGE)
    }

    /// Override the slack (PCC) voltage setpoint.
    pub fn set_slack_voltage(&mut self, v: f64) {
        let i = self.slack_index();
        self.buses[i].v_set = Some(v);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ParseError> {
        let net: Network =
            serde_json::from_str(text).map_err(|e| ParseError::Json(e.to_string()))?;
        let diags = validate_network(&net);
        if diags.is_empty() {
            Ok(net)
        } else {
            Err(ParseError::Invalid(diags))
        }
    }
}

/// Default point-of-common-coupling voltage setpoint in p.u.
pub const DEFAULT_PCC_VOLTAGE: f64 = 1.03;

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported case feature: {0}")]
    Unsupported(String),
    #[error("invalid network: {}", format_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),
    #[error("invalid network JSON: {0}")]
    Json(String),
}

fn format_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Violated-invariant report from [`validate_network`].
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    NoSlackBus,
    MultipleSlackBuses { ids: Vec<BusId> },
    DuplicateBusId { id: BusId },
    NegativeLoad { id: BusId },
    NonPositiveBaseKv { id: BusId },
    UnknownBranchEndpoint { from: BusId, to: BusId, missing: BusId },
    NegativeResistance { from: BusId, to: BusId },
    ZeroReactance { from: BusId, to: BusId },
    Disconnected { unreachable: Vec<BusId> },
    PeakLoadMismatch { stored: f64, sum: f64 },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::NoSlackBus => write!(f, "no slack bus"),
            Diagnostic::MultipleSlackBuses { ids } => {
                write!(f, "multiple slack buses: ")?;
                for (i, id) in ids.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{id}")?;
                }
                Ok(())
            }
            Diagnostic::DuplicateBusId { id } => write!(f, "duplicate bus id {id}"),
            Diagnostic::NegativeLoad { id } => write!(f, "negative active load at bus {id}"),
            Diagnostic::NonPositiveBaseKv { id } => {
                write!(f, "non-positive base kV at bus {id}")
            }
            Diagnostic::UnknownBranchEndpoint { from, to, missing } => write!(
                f,
                "branch {from}-{to} references nonexistent bus {missing}"
            ),
            Diagnostic::NegativeResistance { from, to } => {
                write!(f, "negative resistance on branch {from}-{to}")
            }
            Diagnostic::ZeroReactance { from, to } => {
                write!(f, "zero reactance on branch {from}-{to}")
            }
            Diagnostic::Disconnected { unreachable } => {
                write!(f, "network is not connected; unreachable buses: ")?;
                for (i, id) in unreachable.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{id}")?;
                }
                Ok(())
            }
            Diagnostic::PeakLoadMismatch { stored, sum } => write!(
                f,
                "peak_load_mw {stored} does not match bus load sum {sum}"
            ),
        }
    }
}

/// Check every structural invariant of a [`Network`]; returns an empty list
/// iff the network is well formed. Diagnostics, not failures: callers decide
/// whether a violation is fatal.
pub fn validate_network(net: &Network) -> Vec<Diagnostic> {
    let mut diags = Vec::new();

    let mut seen: BTreeMap<BusId, usize> = BTreeMap::new();
    for bus in &net.buses {
        *seen.entry(bus.id).or_insert(0) += 1;
    }
    for (id, count) in &seen {
        if *count > 1 {
            diags.push(Diagnostic::DuplicateBusId { id: *id });
        }
    }

    let slack_ids: Vec<BusId> = net
        .buses
        .iter()
        .filter(|b| b.kind == BusKind::Slack)
        .map(|b| b.id)
        .collect();
    match slack_ids.len() {
        0 => diags.push(Diagnostic::NoSlackBus),
        1 => {}
        _ => diags.push(Diagnostic::MultipleSlackBuses { ids: slack_ids }),
    }

    for bus in &net.buses {
        if bus.kind == BusKind::Pq && bus.p_load_mw < 0.0 {
            diags.push(Diagnostic::NegativeLoad { id: bus.id });
        }
        if bus.base_kv <= 0.0 {
            diags.push(Diagnostic::NonPositiveBaseKv { id: bus.id });
        }
    }

    for br in &net.branches {
        for endpoint in [br.from_bus, br.to_bus] {
            if !seen.contains_key(&endpoint) {
                diags.push(Diagnostic::UnknownBranchEndpoint {
                    from: br.from_bus,
                    to: br.to_bus,
                    missing: endpoint,
                });
            }
        }
        if br.r_pu < 0.0 {
            diags.push(Diagnostic::NegativeResistance {
                from: br.from_bus,
                to: br.to_bus,
            });
        }
        if br.x_pu == 0.0 {
            diags.push(Diagnostic::ZeroReactance {
                from: br.from_bus,
                to: br.to_bus,
            });
        }
    }

    // connectivity over valid endpoints, BFS from the first bus
    if !net.buses.is_empty() {
        let index: BTreeMap<BusId, usize> =
            net.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        let mut adj = vec![Vec::new(); net.buses.len()];
        for br in &net.branches {
            if let (Some(&a), Some(&b)) = (index.get(&br.from_bus), index.get(&br.to_bus)) {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        let mut reached = vec![false; net.buses.len()];
        let mut queue = vec![0usize];
        reached[0] = true;
        while let Some(i) = queue.pop() {
            for &j in &adj[i] {
                if !reached[j] {
                    reached[j] = true;
                    queue.push(j);
                }
            }
        }
        let unreachable: Vec<BusId> = net
            .buses
            .iter()
            .zip(&reached)
            .filter(|(_, r)| !**r)
            .map(|(b, _)| b.id)
            .collect();
        if !unreachable.is_empty() {
            diags.push(Diagnostic::Disconnected { unreachable });
        }
    }

    let sum: f64 = net.buses.iter().map(|b| b.p_load_mw).sum();
    if (net.peak_load_mw - sum).abs() > 1e-9 {
        diags.push(Diagnostic::PeakLoadMismatch {
            stored: net.peak_load_mw,
            sum,
        });
    }

    diags
}

/// Parse a MATPOWER-style case (the subset described in the module docs)
/// into a validated [`Network`].
pub fn parse_matpower_case(text: &str) -> Result<Network, ParseError> {
    let case = RawCase::parse(text)?;

    let base_mva = case
        .base_mva
        .ok_or_else(|| ParseError::Unsupported("missing baseMVA".into()))?;
    let bus_rows = case
        .matrices
        .get("bus")
        .ok_or_else(|| ParseError::Unsupported("missing bus matrix".into()))?;
    let branch_rows = case
        .matrices
        .get("branch")
        .ok_or_else(|| ParseError::Unsupported("missing branch matrix".into()))?;
    let gen_rows = case.matrices.get("gen");

    let mut buses = Vec::with_capacity(bus_rows.len());
    for (row, line) in bus_rows {
        if row.len() < 13 {
            return Err(ParseError::Syntax {
                line: *line,
                column: 1,
                message: format!("bus row has {} columns, expected 13", row.len()),
            });
        }
        let id = BusId(row[0] as u32);
        let kind = match row[1] as i64 {
            3 => BusKind::Slack,
            1 => BusKind::Pq,
            other => {
                return Err(ParseError::Unsupported(format!(
                    "bus {id} has type {other}; only PQ (1) and slack (3) are supported"
                )))
            }
        };
        buses.push(Bus {
            id,
            kind,
            p_load_mw: row[2],
            q_load_mvar: row[3],
            g_shunt_mw: row[4],
            b_shunt_mvar: row[5],
            base_kv: row[9],
            v_set: if kind == BusKind::Slack {
                Some(row[7])
            } else {
                None
            },
        });
    }

    // gen rows locate the slack machine and carry its voltage setpoint
    if let Some(rows) = gen_rows {
        for (row, line) in rows {
            if row.len() < 10 {
                return Err(ParseError::Syntax {
                    line: *line,
                    column: 1,
                    message: format!("gen row has {} columns, expected at least 10", row.len()),
                });
            }
            let at = BusId(row[0] as u32);
            if let Some(bus) = buses.iter_mut().find(|b| b.id == at) {
                if bus.kind == BusKind::Slack {
                    bus.v_set = Some(row[5]);
                }
            }
        }
    }

    let mut branches = Vec::with_capacity(branch_rows.len());
    for (row, line) in branch_rows {
        if row.len() < 11 {
            return Err(ParseError::Syntax {
                line: *line,
                column: 1,
                message: format!("branch row has {} columns, expected at least 11", row.len()),
            });
        }
        let from_bus = BusId(row[0] as u32);
        let to_bus = BusId(row[1] as u32);
        if row[8] != 0.0 || row[9] != 0.0 {
            return Err(ParseError::Unsupported(format!(
                "branch {from_bus}-{to_bus} uses an off-nominal tap or phase shift"
            )));
        }
        if row[10] != 1.0 {
            return Err(ParseError::Unsupported(format!(
                "branch {from_bus}-{to_bus} is out of service"
            )));
        }
        branches.push(Branch {
            from_bus,
            to_bus,
            r_pu: row[2],
            x_pu: row[3],
            b_charging_pu: row[4],
            rating_mva: if row[5] > 0.0 { Some(row[5]) } else { None },
        });
    }

    let peak_load_mw = buses.iter().map(|b| b.p_load_mw).sum();
    let net = Network {
        base_mva,
        buses,
        branches,
        peak_load_mw,
    };
    let diags = validate_network(&net);
    if diags.is_empty() {
        Ok(net)
    } else {
        Err(ParseError::Invalid(diags))
    }
}

/// Matrices a case file may carry without being rejected. `version` is a
/// string assignment handled separately.
const SUPPORTED_MATRICES: &[&str] = &["bus", "gen", "branch"];

struct RawCase {
    base_mva: Option<f64>,
    matrices: BTreeMap<String, Vec<(Vec<f64>, usize)>>,
}

impl RawCase {
    fn parse(text: &str) -> Result<Self, ParseError> {
        let mut base_mva = None;
        let mut matrices: BTreeMap<String, Vec<(Vec<f64>, usize)>> = BTreeMap::new();
        let mut lines = text.lines().enumerate().peekable();

        while let Some((ln, raw)) = lines.next() {
            let line = strip_comment(raw);
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with("function") {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix("mpc.") {
                let (name, after) = rest
                    .split_once('=')
                    .ok_or_else(|| syntax(ln, raw, "expected '=' in assignment"))?;
                let name = name.trim();
                let after = after.trim();
                if name == "version" {
                    continue;
                }
                if name == "baseMVA" {
                    let value = after.trim_end_matches(';').trim();
                    base_mva = Some(value.parse::<f64>().map_err(|_| {
                        syntax(ln, raw, &format!("invalid baseMVA value '{value}'"))
                    })?);
                    continue;
                }
                if !after.starts_with('[') {
                    return Err(ParseError::Unsupported(format!(
                        "scalar or non-matrix field 'mpc.{name}'"
                    )));
                }
                if !SUPPORTED_MATRICES.contains(&name) {
                    return Err(ParseError::Unsupported(format!("matrix 'mpc.{name}'")));
                }
                // gather rows until the closing bracket
                let mut rows = Vec::new();
                let mut body = after[1..].to_string();
                let mut cur_ln = ln;
                loop {
                    let (done, content) = match body.find(']') {
                        Some(pos) => (true, body[..pos].to_string()),
                        None => (false, body.clone()),
                    };
                    for piece in content.split(';') {
                        let piece = piece.trim();
                        if piece.is_empty() {
                            continue;
                        }
                        let mut row = Vec::new();
                        for (ci, tok) in piece.split_whitespace().enumerate() {
                            let v = tok.parse::<f64>().map_err(|_| ParseError::Syntax {
                                line: cur_ln + 1,
                                column: ci + 1,
                                message: format!("invalid number '{tok}' in mpc.{name}"),
                            })?;
                            row.push(v);
                        }
                        rows.push((row, cur_ln + 1));
                    }
                    if done {
                        break;
                    }
                    match lines.next() {
                        Some((next_ln, next_raw)) => {
                            cur_ln = next_ln;
                            body = strip_comment(next_raw).trim().to_string();
                        }
                        None => {
                            return Err(syntax(cur_ln, "", &format!("unterminated mpc.{name}")));
                        }
                    }
                }
                matrices.insert(name.to_string(), rows);
            } else {
                return Err(syntax(ln, raw, "expected 'mpc.' assignment"));
            }
        }

        Ok(RawCase { base_mva, matrices })
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn syntax(line_idx: usize, raw: &str, message: &str) -> ParseError {
    let column = raw.len() - raw.trim_start().len() + 1;
    ParseError::Syntax {
        line: line_idx + 1,
        column,
        message: message.to_string(),
    }
}

/// Bundled 33-bus feeder (12.66 kV, 3.715 MW / 2.3 MVar peak, capacitor
/// banks at buses 18 and 33).
pub const CASE33: &str = include_str!("../data/case33.m");

/// Bundled 123-bus feeder (4.16 kV, 3.51 MW / 1.93 MVar peak, capacitor
/// banks at buses 51, 61 and 64).
pub const CASE123: &str = include_str!("../data/case123.m");
