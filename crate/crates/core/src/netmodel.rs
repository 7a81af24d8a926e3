//! Feeder data model: buses, lines, radial validation, canonical orderings.
//!
//! Files store physical units (kW, kvar, ohm); the model works in per-unit
//! on the declared MVA and kV bases. The rooted order and the directed end
//! index are pure functions of the topology: they are derived from sorted
//! bus ids, so permuting the input sequences does not change them.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default voltage base in kV when a file does not declare one.
pub const DEFAULT_BASE_KV: f64 = 4.16;

/// Position of a bus in [`NetworkModel::buses`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BusIdx(pub usize);

/// Position of a line in [`NetworkModel::lines`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LineIdx(pub usize);

/// Position of a directed end in [`NetworkModel::ends`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EndIdx(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pq,
}

/// A bus with nominal demand and DG capacity, all in per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: String,
    pub kind: BusKind,
    pub load_p: f64,
    pub load_q: f64,
    pub dg_capacity_p: f64,
}

/// A series branch in per-unit; `from`/`to` keep the declared orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub id: String,
    pub from: BusIdx,
    pub to: BusIdx,
    pub r: f64,
    pub x: f64,
}

/// One orientation of a line; flows are positive leaving `from` into the line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectedEnd {
    pub line: LineIdx,
    pub from: BusIdx,
    pub to: BusIdx,
}

/// On-disk schema (physical units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDoc {
    pub base_mva: f64,
    #[serde(default = "default_base_kv")]
    pub base_kv: f64,
    pub buses: Vec<BusDoc>,
    pub lines: Vec<LineDoc>,
}

fn default_base_kv() -> f64 {
    DEFAULT_BASE_KV
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusDoc {
    pub id: String,
    pub kind: BusKind,
    #[serde(default)]
    pub load_p_kw: f64,
    #[serde(default)]
    pub load_q_kvar: f64,
    #[serde(default)]
    pub dg_p_kw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineDoc {
    pub id: String,
    pub from: String,
    pub to: String,
    pub r_ohm: f64,
    pub x_ohm: f64,
}

/// One violation of a structural invariant, named after the offender.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub code: &'static str,
    pub message: String,
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}", self.code, self.message)
    }
}

/// Validated radial feeder with derived orderings and index maps.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub base_mva: f64,
    pub base_kv: f64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    slack: BusIdx,
    /// Bus indices with the slack first and every parent before its children.
    rooted_order: Vec<BusIdx>,
    /// Parent bus and connecting line for every non-slack bus.
    parent: Vec<Option<(BusIdx, LineIdx)>>,
    children: Vec<Vec<(BusIdx, LineIdx)>>,
    /// Both orientations of every line, adjacent, in sorted-bus-id order.
    ends: Vec<DirectedEnd>,
    end_index: HashMap<(BusIdx, BusIdx), EndIdx>,
    /// Directed ends leaving each bus; the terms of its nodal balance.
    ends_leaving: Vec<Vec<EndIdx>>,
    bus_index: HashMap<String, BusIdx>,
    line_index: HashMap<String, LineIdx>,
    /// Position of each bus in `rooted_order`.
    rooted_pos: Vec<usize>,
    doc: NetworkDoc,
}

impl NetworkModel {
    /// Loads and validates a network file. Any finding is an error.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: NetworkDoc = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_doc(doc)
    }

    /// Builds the model from a parsed document, rejecting any finding.
    pub fn from_doc(doc: NetworkDoc) -> Result<Self> {
        let findings = validate_radial(&doc);
        if let Some(first) = findings.first() {
            let rest = findings.len() - 1;
            let suffix = if rest > 0 {
                format!(" (+{rest} more)")
            } else {
                String::new()
            };
            return Err(Error::InvalidNetwork(format!("{first}{suffix}")));
        }

        let s_base_kw = doc.base_mva * 1000.0;
        let z_base_ohm = doc.base_kv * doc.base_kv / doc.base_mva;

        let buses: Vec<Bus> = doc
            .buses
            .iter()
            .map(|b| Bus {
                id: b.id.clone(),
                kind: b.kind,
                load_p: b.load_p_kw / s_base_kw,
                load_q: b.load_q_kvar / s_base_kw,
                dg_capacity_p: b.dg_p_kw / s_base_kw,
            })
            .collect();
        let bus_index: HashMap<String, BusIdx> = buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id.clone(), BusIdx(i)))
            .collect();
        let lines: Vec<Line> = doc
            .lines
            .iter()
            .map(|l| Line {
                id: l.id.clone(),
                from: bus_index[&l.from],
                to: bus_index[&l.to],
                r: l.r_ohm / z_base_ohm,
                x: l.x_ohm / z_base_ohm,
            })
            .collect();
        let line_index: HashMap<String, LineIdx> = lines
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.clone(), LineIdx(i)))
            .collect();

        let slack = BusIdx(
            buses
                .iter()
                .position(|b| b.kind == BusKind::Slack)
                .expect("validated: exactly one slack"),
        );

        // Adjacency with neighbors in sorted-id order makes the rooting a
        // pure function of the topology.
        let mut adjacency: Vec<Vec<(BusIdx, LineIdx)>> = vec![Vec::new(); buses.len()];
        for (i, line) in lines.iter().enumerate() {
            adjacency[line.from.0].push((line.to, LineIdx(i)));
            adjacency[line.to.0].push((line.from, LineIdx(i)));
        }
        for list in &mut adjacency {
            list.sort_by(|a, b| buses[a.0 .0].id.cmp(&buses[b.0 .0].id));
        }

        let mut rooted_order = Vec::with_capacity(buses.len());
        let mut parent: Vec<Option<(BusIdx, LineIdx)>> = vec![None; buses.len()];
        let mut children: Vec<Vec<(BusIdx, LineIdx)>> = vec![Vec::new(); buses.len()];
        let mut seen = vec![false; buses.len()];
        let mut queue = std::collections::VecDeque::new();
        seen[slack.0] = true;
        queue.push_back(slack);
        while let Some(bus) = queue.pop_front() {
            rooted_order.push(bus);
            for &(next, line) in &adjacency[bus.0] {
                if !seen[next.0] {
                    seen[next.0] = true;
                    parent[next.0] = Some((bus, line));
                    children[bus.0].push((next, line));
                    queue.push_back(next);
                }
            }
        }
        debug_assert_eq!(rooted_order.len(), buses.len(), "validated: connected");
        let mut rooted_pos = vec![0usize; buses.len()];
        for (pos, &bus) in rooted_order.iter().enumerate() {
            rooted_pos[bus.0] = pos;
        }

        // Canonical directed ends: lines keyed by their sorted id pair, both
        // orientations adjacent, lower id first.
        let mut keyed: Vec<(String, String, LineIdx)> = lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let a = buses[l.from.0].id.clone();
                let b = buses[l.to.0].id.clone();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                (lo, hi, LineIdx(i))
            })
            .collect();
        keyed.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
        let mut ends = Vec::with_capacity(2 * lines.len());
        for (lo, hi, line) in keyed {
            let lo = bus_index[&lo];
            let hi = bus_index[&hi];
            ends.push(DirectedEnd {
                line,
                from: lo,
                to: hi,
            });
            ends.push(DirectedEnd {
                line,
                from: hi,
                to: lo,
            });
        }
        let end_index: HashMap<(BusIdx, BusIdx), EndIdx> = ends
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.from, e.to), EndIdx(i)))
            .collect();
        let mut ends_leaving: Vec<Vec<EndIdx>> = vec![Vec::new(); buses.len()];
        for (i, e) in ends.iter().enumerate() {
            ends_leaving[e.from.0].push(EndIdx(i));
        }

        Ok(NetworkModel {
            base_mva: doc.base_mva,
            base_kv: doc.base_kv,
            buses,
            lines,
            slack,
            rooted_order,
            parent,
            children,
            ends,
            end_index,
            ends_leaving,
            bus_index,
            line_index,
            rooted_pos,
            doc,
        })
    }

    /// Re-emits the document this model was built from, unchanged.
    pub fn to_doc(&self) -> NetworkDoc {
        self.doc.clone()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.doc).expect("schema serializes");
        crate::write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn slack(&self) -> BusIdx {
        self.slack
    }

    pub fn rooted_order(&self) -> &[BusIdx] {
        &self.rooted_order
    }

    /// Position of `bus` in the rooted order; the slack maps to 0.
    pub fn rooted_pos(&self, bus: BusIdx) -> usize {
        self.rooted_pos[bus.0]
    }

    pub fn parent(&self, bus: BusIdx) -> Option<(BusIdx, LineIdx)> {
        self.parent[bus.0]
    }

    pub fn children(&self, bus: BusIdx) -> &[(BusIdx, LineIdx)] {
        &self.children[bus.0]
    }

    /// All 2·|lines| directed ends in canonical order.
    pub fn ends(&self) -> &[DirectedEnd] {
        &self.ends
    }

    pub fn end(&self, idx: EndIdx) -> DirectedEnd {
        self.ends[idx.0]
    }

    pub fn end_index(&self, from: BusIdx, to: BusIdx) -> Option<EndIdx> {
        self.end_index.get(&(from, to)).copied()
    }

    /// The same line's other directed end; ends of a line are adjacent.
    pub fn opposite(&self, idx: EndIdx) -> EndIdx {
        let opp = EndIdx(idx.0 ^ 1);
        debug_assert_eq!(self.ends[opp.0].line, self.ends[idx.0].line);
        opp
    }

    /// The parent→child directed end of `line` in the rooted tree.
    pub fn downhill_end(&self, line: LineIdx) -> EndIdx {
        let l = &self.lines[line.0];
        let (i, j) = if self.parent[l.to.0].map(|(p, _)| p) == Some(l.from) {
            (l.from, l.to)
        } else {
            (l.to, l.from)
        };
        self.end_index[&(i, j)]
    }

    /// Directed ends leaving `bus`, i.e. the terms of its nodal balance.
    pub fn ends_leaving(&self, bus: BusIdx) -> &[EndIdx] {
        &self.ends_leaving[bus.0]
    }

    pub fn bus(&self, idx: BusIdx) -> &Bus {
        &self.buses[idx.0]
    }

    pub fn line(&self, idx: LineIdx) -> &Line {
        &self.lines[idx.0]
    }

    pub fn bus_idx(&self, id: &str) -> Result<BusIdx> {
        self.bus_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownBus(id.to_string()))
    }

    pub fn line_idx(&self, id: &str) -> Result<LineIdx> {
        self.line_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownLine(id.to_string()))
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn n_ends(&self) -> usize {
        self.ends.len()
    }

    /// Dimension of the estimation state: one squared voltage per bus plus
    /// an active and a reactive flow per directed end.
    pub fn state_dim(&self) -> usize {
        self.n_buses() + 2 * self.n_ends()
    }
}

/// Checks every structural invariant and reports all violations as data.
pub fn validate_radial(doc: &NetworkDoc) -> Vec<Finding> {
    let mut findings = Vec::new();
    let mut push = |code: &'static str, message: String| {
        findings.push(Finding { code, message });
    };

    if !(doc.base_mva.is_finite() && doc.base_mva > 0.0) {
        push(
            "bad-base",
            format!("base_mva must be positive, got {}", doc.base_mva),
        );
    }
    if !(doc.base_kv.is_finite() && doc.base_kv > 0.0) {
        push(
            "bad-base",
            format!("base_kv must be positive, got {}", doc.base_kv),
        );
    }

    let mut bus_ids = HashSet::new();
    for bus in &doc.buses {
        if !bus_ids.insert(bus.id.as_str()) {
            push(
                "duplicate-bus-id",
                format!("bus id {:?} appears more than once", bus.id),
            );
        }
        for (field, value) in [
            ("load_p_kw", bus.load_p_kw),
            ("load_q_kvar", bus.load_q_kvar),
            ("dg_p_kw", bus.dg_p_kw),
        ] {
            if !value.is_finite() || value < 0.0 {
                push(
                    "bad-bus-value",
                    format!(
                        "bus {:?}: {field} must be finite and >= 0, got {value}",
                        bus.id
                    ),
                );
            }
        }
    }

    let slack_count = doc
        .buses
        .iter()
        .filter(|b| b.kind == BusKind::Slack)
        .count();
    if slack_count == 0 {
        push("no-slack", "network declares no slack bus".to_string());
    } else if slack_count > 1 {
        push(
            "multiple-slack",
            format!("network declares {slack_count} slack buses"),
        );
    }

    let mut line_ids = HashSet::new();
    let mut pairs: HashMap<(String, String), &str> = HashMap::new();
    let mut resolvable = Vec::new();
    for line in &doc.lines {
        if !line_ids.insert(line.id.as_str()) {
            push(
                "duplicate-line-id",
                format!("line id {:?} appears more than once", line.id),
            );
        }
        for (field, value) in [("r_ohm", line.r_ohm), ("x_ohm", line.x_ohm)] {
            if !value.is_finite() || value < 0.0 {
                push(
                    "bad-line-value",
                    format!(
                        "line {:?}: {field} must be finite and >= 0, got {value}",
                        line.id
                    ),
                );
            }
        }
        let mut endpoints_ok = true;
        for end in [&line.from, &line.to] {
            if !bus_ids.contains(end.as_str()) {
                push(
                    "unknown-endpoint",
                    format!("line {:?} references unknown bus {end:?}", line.id),
                );
                endpoints_ok = false;
            }
        }
        if line.from == line.to {
            push(
                "self-loop",
                format!("line {:?} connects bus {:?} to itself", line.id, line.from),
            );
            endpoints_ok = false;
        }
        if endpoints_ok {
            let key = if line.from <= line.to {
                (line.from.clone(), line.to.clone())
            } else {
                (line.to.clone(), line.from.clone())
            };
            if let Some(other) = pairs.get(&key) {
                push(
                    "parallel-line",
                    format!(
                        "line {:?} duplicates line {other:?} between {:?} and {:?}: parallel line creates a cycle",
                        line.id, key.0, key.1
                    ),
                );
            } else {
                pairs.insert(key, &line.id);
                resolvable.push(line);
            }
        }
    }

    if doc.lines.len() + 1 != doc.buses.len() {
        push(
            "not-a-tree",
            format!(
                "{} buses need exactly {} lines for a radial feeder, got {}",
                doc.buses.len(),
                doc.buses.len().saturating_sub(1),
                doc.lines.len()
            ),
        );
    }

    // Connectivity and cycles via union-find over the resolvable lines.
    let ids: Vec<&str> = doc.buses.iter().map(|b| b.id.as_str()).collect();
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let mut root: Vec<usize> = (0..ids.len()).collect();
    fn find(root: &mut [usize], mut i: usize) -> usize {
        while root[i] != i {
            root[i] = root[root[i]];
            i = root[i];
        }
        i
    }
    for line in resolvable {
        let a = find(&mut root, index[line.from.as_str()]);
        let b = find(&mut root, index[line.to.as_str()]);
        if a == b {
            push(
                "cycle",
                format!(
                    "line {:?} closes a cycle between {:?} and {:?}",
                    line.id, line.from, line.to
                ),
            );
        } else {
            root[a] = b;
        }
    }
    if slack_count == 1 && !doc.buses.is_empty() {
        let slack_id = doc
            .buses
            .iter()
            .find(|b| b.kind == BusKind::Slack)
            .map(|b| b.id.as_str())
            .expect("slack_count == 1");
        let slack_root = find(&mut root, index[slack_id]);
        let mut disconnected: Vec<&str> = ids
            .iter()
            .copied()
            .filter(|id| find(&mut root, index[id]) != slack_root)
            .collect();
        disconnected.sort_unstable();
        for id in disconnected {
            push(
                "disconnected",
                format!("bus {id:?} is not connected to the slack bus"),
            );
        }
    }

    findings
}

/// Per-bus net injections in per-unit; generation positive, load negative.
/// The slack entry is unused: its injection balances the feeder.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    /// Net active injection per bus index.
    pub inj_p: Vec<f64>,
    /// Net reactive injection per bus index.
    pub inj_q: Vec<f64>,
    /// Active DG output per bus index, kept for capacity audits.
    pub gen_p: Vec<f64>,
}

impl Dispatch {
    pub fn zeros(net: &NetworkModel) -> Self {
        Dispatch {
            inj_p: vec![0.0; net.n_buses()],
            inj_q: vec![0.0; net.n_buses()],
            gen_p: vec![0.0; net.n_buses()],
        }
    }

    /// Serializes as a map from bus id to `[inj_p, inj_q]`, slack omitted.
    pub fn to_doc(&self, net: &NetworkModel) -> BTreeMap<String, [f64; 2]> {
        net.buses
            .iter()
            .enumerate()
            .filter(|(i, _)| BusIdx(*i) != net.slack())
            .map(|(i, b)| (b.id.clone(), [self.inj_p[i], self.inj_q[i]]))
            .collect()
    }

    /// Reads a dispatch document; buses absent from the map inject nothing.
    pub fn from_doc(doc: &BTreeMap<String, [f64; 2]>, net: &NetworkModel) -> Result<Self> {
        let mut dispatch = Dispatch::zeros(net);
        for (id, [p, q]) in doc {
            let idx = net.bus_idx(id)?;
            if idx == net.slack() {
                return Err(Error::InvalidConfig(format!(
                    "dispatch assigns an injection to the slack bus {id:?}"
                )));
            }
            if !(p.is_finite() && q.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("dispatch injection at bus {id:?}"),
                });
            }
            dispatch.inj_p[idx.0] = *p;
            dispatch.inj_q[idx.0] = *q;
        }
        Ok(dispatch)
    }

    pub fn load(path: impl AsRef<Path>, net: &NetworkModel) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: BTreeMap<String, [f64; 2]> =
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        Self::from_doc(&doc, net)
    }
}

#[cfg(test)]
pub(crate) mod testnet {
    use super::*;

    /// Unit bases so per-unit values equal their physical counterparts
    /// (1 MVA, 1 kV: 1000 kW per unit power, 1 ohm per unit impedance).
    pub fn doc(
        buses: &[(&str, BusKind, f64, f64, f64)],
        lines: &[(&str, &str, &str, f64, f64)],
    ) -> NetworkDoc {
        NetworkDoc {
            base_mva: 1.0,
            base_kv: 1.0,
            buses: buses
                .iter()
                .map(|(id, kind, p, q, dg)| BusDoc {
                    id: id.to_string(),
                    kind: *kind,
                    load_p_kw: p * 1000.0,
                    load_q_kvar: q * 1000.0,
                    dg_p_kw: dg * 1000.0,
                })
                .collect(),
            lines: lines
                .iter()
                .map(|(id, from, to, r, x)| LineDoc {
                    id: id.to_string(),
                    from: from.to_string(),
                    to: to.to_string(),
                    r_ohm: *r,
                    x_ohm: *x,
                })
                .collect(),
        }
    }

    /// Random radial feeder for property tests: bus k attaches to a uniformly
    /// chosen earlier bus, with plausible per-unit impedances and loads.
    pub fn random_tree(seed: u64, n: usize) -> NetworkModel {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, 0, crate::rng::Purpose::Scenario(u32::MAX));
        let n = n.max(2);
        let mut buses = Vec::with_capacity(n);
        buses.push(("bus0".to_string(), BusKind::Slack, 0.0, 0.0, 0.0));
        for k in 1..n {
            let load = rng.gen_bool(0.7);
            let (p, q) = if load {
                let p = rng.gen_range(0.002..0.03);
                (p, p * rng.gen_range(0.2..0.6))
            } else {
                (0.0, 0.0)
            };
            let dg = if rng.gen_bool(0.4) {
                rng.gen_range(0.002..0.012)
            } else {
                0.0
            };
            buses.push((format!("bus{k}"), BusKind::Pq, p, q, dg));
        }
        let mut lines = Vec::with_capacity(n - 1);
        for k in 1..n {
            let parent = rng.gen_range(0..k);
            let r = rng.gen_range(0.001..0.04);
            let x = r * rng.gen_range(0.5..2.0);
            lines.push((
                format!("l{k}"),
                format!("bus{parent}"),
                format!("bus{k}"),
                r,
                x,
            ));
        }
        let bus_refs: Vec<(&str, BusKind, f64, f64, f64)> = buses
            .iter()
            .map(|(id, kind, p, q, dg)| (id.as_str(), *kind, *p, *q, *dg))
            .collect();
        let line_refs: Vec<(&str, &str, &str, f64, f64)> = lines
            .iter()
            .map(|(id, from, to, r, x)| (id.as_str(), from.as_str(), to.as_str(), *r, *x))
            .collect();
        NetworkModel::from_doc(doc(&bus_refs, &line_refs)).expect("random tree is valid")
    }

    /// The reference 3-bus chain: slack - (0.01 + j0.02) - b1 - (0.01 + j0.01) - b2,
    /// with a 0.1 + j0.05 load at b2 and nothing at b1.
    pub fn chain3() -> NetworkModel {
        NetworkModel::from_doc(doc(
            &[
                ("s", BusKind::Slack, 0.0, 0.0, 0.0),
                ("b1", BusKind::Pq, 0.0, 0.0, 0.0),
                ("b2", BusKind::Pq, 0.1, 0.05, 0.0),
            ],
            &[
                ("l1", "s", "b1", 0.01, 0.02),
                ("l2", "b1", "b2", 0.01, 0.01),
            ],
        ))
        .expect("chain3 is valid")
    }
}
