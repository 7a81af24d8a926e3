//! Weighted least-squares estimation over the linear measurement model, plus
//! the antisymmetry post-filter for outlying flow directions.
//!
//! The state stacks squared voltage magnitudes (buses in rooted order) ahead
//! of active then reactive directed-end flows. [`assemble`] turns a
//! [`MeasurementSet`] into sparse design rows, [`solve_wls`] factorizes the
//! weighted system with a rank-revealing column-pivoted QR, and
//! [`postfilter_antisymmetry`] repairs flow directions whose nodal balances
//! disagree with their opposites.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Once;

use faer::prelude::*;
use serde::{Deserialize, Serialize};

use crate::measurement::{Axis, MeasurementKind, MeasurementSet};
use crate::netmodel::{BusIdx, EndIdx, NetworkModel};
use crate::powerflow::{LineFlowDoc, PowerFlowSolution};
use crate::{Error, Result};

/// Column bookkeeping for the flat state layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    /// Bus index → column (the bus's rooted position).
    v_col: Vec<usize>,
    /// Column → bus index (rooted order).
    v_bus: Vec<usize>,
    n_ends: usize,
}

impl Layout {
    fn of(net: &NetworkModel) -> Layout {
        Layout {
            v_col: (0..net.n_buses())
                .map(|b| net.rooted_pos(BusIdx(b)))
                .collect(),
            v_bus: net.rooted_order().iter().map(|b| b.0).collect(),
            n_ends: net.n_ends(),
        }
    }

    fn n_buses(&self) -> usize {
        self.v_bus.len()
    }

    fn dim(&self) -> usize {
        self.n_buses() + 2 * self.n_ends
    }

    fn col_v(&self, bus: BusIdx) -> usize {
        self.v_col[bus.0]
    }

    fn col_p(&self, end: EndIdx) -> usize {
        self.n_buses() + end.0
    }

    fn col_q(&self, end: EndIdx) -> usize {
        self.n_buses() + self.n_ends + end.0
    }
}

/// Estimation state: squared voltages per bus, flows per directed end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub v_sq: Vec<f64>,
    pub flow_p: Vec<f64>,
    pub flow_q: Vec<f64>,
}

impl StateVector {
    pub fn zeros(net: &NetworkModel) -> StateVector {
        StateVector {
            v_sq: vec![0.0; net.n_buses()],
            flow_p: vec![0.0; net.n_ends()],
            flow_q: vec![0.0; net.n_ends()],
        }
    }

    /// Truth view of a power-flow solution, for error computation.
    pub fn from_solution(sol: &PowerFlowSolution) -> StateVector {
        StateVector {
            v_sq: sol.v_sq.clone(),
            flow_p: sol.flow_p.clone(),
            flow_q: sol.flow_q.clone(),
        }
    }

    /// Flattens into the canonical column order.
    pub fn to_flat(&self, net: &NetworkModel) -> Vec<f64> {
        self.flatten(&Layout::of(net))
    }

    /// Rebuilds from a flat vector in the canonical column order.
    pub fn from_flat(net: &NetworkModel, flat: &[f64]) -> StateVector {
        StateVector::unflatten(&Layout::of(net), flat)
    }

    fn flatten(&self, layout: &Layout) -> Vec<f64> {
        assert_eq!(self.v_sq.len(), layout.n_buses());
        assert_eq!(self.flow_p.len(), layout.n_ends);
        let mut flat = vec![0.0; layout.dim()];
        for (b, &v) in self.v_sq.iter().enumerate() {
            flat[layout.v_col[b]] = v;
        }
        for e in 0..layout.n_ends {
            flat[layout.col_p(EndIdx(e))] = self.flow_p[e];
            flat[layout.col_q(EndIdx(e))] = self.flow_q[e];
        }
        flat
    }

    fn unflatten(layout: &Layout, flat: &[f64]) -> StateVector {
        assert_eq!(flat.len(), layout.dim());
        let mut sv = StateVector {
            v_sq: vec![0.0; layout.n_buses()],
            flow_p: vec![0.0; layout.n_ends],
            flow_q: vec![0.0; layout.n_ends],
        };
        for (col, &b) in layout.v_bus.iter().enumerate() {
            sv.v_sq[b] = flat[col];
        }
        for e in 0..layout.n_ends {
            sv.flow_p[e] = flat[layout.col_p(EndIdx(e))];
            sv.flow_q[e] = flat[layout.col_q(EndIdx(e))];
        }
        sv
    }
}

/// One sparse design row: Σ coeff·x[col] ≈ z at weight w.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignRow {
    pub cols: Vec<usize>,
    pub coeffs: Vec<f64>,
    pub z: f64,
    pub w: f64,
    /// Index of the originating measurement in the set.
    pub source: usize,
}

impl DesignRow {
    fn dot(&self, flat: &[f64]) -> f64 {
        self.cols
            .iter()
            .zip(&self.coeffs)
            .map(|(&c, &a)| a * flat[c])
            .sum()
    }
}

/// Assembled weighted linear system plus the layout that defines its columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSystem {
    pub rows: Vec<DesignRow>,
    pub(crate) layout: Layout,
    /// Nodal-balance rows by (bus index, axis, row): the post-filter's
    /// scoring material.
    inj_rows: Vec<(usize, Axis, usize)>,
}

impl DesignSystem {
    /// A rowless system over `net`'s layout (estimates loaded from disk).
    pub fn empty(net: &NetworkModel) -> DesignSystem {
        DesignSystem {
            rows: Vec::new(),
            layout: Layout::of(net),
            inj_rows: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.layout.dim()
    }

    /// Unweighted residuals z − H·x.
    pub fn residuals(&self, flat: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.z - r.dot(flat)).collect()
    }

    pub fn weighted_cost(&self, residuals: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(residuals)
            .map(|(r, &e)| r.w * e * e)
            .sum()
    }

    /// Dense √w-scaled copies of H and z.
    fn scaled_dense(&self) -> (Mat<f64>, Mat<f64>) {
        let (m, n) = (self.n_rows(), self.n_cols());
        let mut a = Mat::<f64>::zeros(m, n);
        let mut b = Mat::<f64>::zeros(m, 1);
        for (i, row) in self.rows.iter().enumerate() {
            let sw = row.w.sqrt();
            for (&c, &v) in row.cols.iter().zip(&row.coeffs) {
                a[(i, c)] += sw * v;
            }
            b[(i, 0)] = sw * row.z;
        }
        (a, b)
    }

    /// Numerical rank of the weighted design matrix.
    pub fn numerical_rank(&self) -> usize {
        self.rank_and_diag_ratio().0
    }

    /// Numerical rank plus min/max ratio of the triangular factor's diagonal.
    ///
    /// The ratio is a cheap conditioning estimate from the same pivoted
    /// factorization that determines the rank: values near machine epsilon
    /// mean the system is full rank only nominally and a solve would amplify
    /// measurement noise by the reciprocal of the ratio.
    pub fn rank_and_diag_ratio(&self) -> (usize, f64) {
        if self.rows.is_empty() {
            return (0, 0.0);
        }
        sequential_kernels();
        let (a, _) = self.scaled_dense();
        let qr = a.col_piv_qr();
        rank_and_ratio_from_r(qr.R(), self.n_rows(), self.n_cols())
    }
}

/// Pins the dense kernels to sequential execution: per-solve problems are
/// small, parallelism lives across Monte Carlo runs, and results must not
/// depend on worker count.
fn sequential_kernels() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

fn rank_and_ratio_from_r(r: MatRef<'_, f64>, m: usize, n: usize) -> (usize, f64) {
    let k = m.min(n);
    let (mut largest, mut smallest) = (0.0f64, f64::INFINITY);
    for i in 0..k {
        let d = r[(i, i)].abs();
        largest = largest.max(d);
        smallest = smallest.min(d);
    }
    if largest == 0.0 {
        return (0, 0.0);
    }
    let tol = largest * f64::EPSILON * (m.max(n) as f64);
    let rank = (0..k).filter(|&i| r[(i, i)].abs() > tol).count();
    (rank, smallest / largest)
}

/// Builds the sparse design system for a measurement set.
pub fn assemble(net: &NetworkModel, set: &MeasurementSet) -> Result<DesignSystem> {
    let layout = Layout::of(net);
    let check_bus = |b: BusIdx| -> Result<BusIdx> {
        if b.0 < net.n_buses() {
            Ok(b)
        } else {
            Err(Error::UnknownBus(format!("bus index {}", b.0)))
        }
    };
    let check_end = |e: EndIdx| -> Result<EndIdx> {
        if e.0 < net.n_ends() {
            Ok(e)
        } else {
            Err(Error::UnknownLine(format!("directed end index {}", e.0)))
        }
    };
    let check_line = |l: crate::netmodel::LineIdx| -> Result<crate::netmodel::LineIdx> {
        if l.0 < net.n_lines() {
            Ok(l)
        } else {
            Err(Error::UnknownLine(format!("line index {}", l.0)))
        }
    };

    let mut rows = Vec::with_capacity(set.measurements.len());
    let mut inj_rows = Vec::new();
    for (k, m) in set.measurements.iter().enumerate() {
        match m.kind {
            MeasurementKind::VSq(b) => {
                let b = check_bus(b)?;
                rows.push(DesignRow {
                    cols: vec![layout.col_v(b)],
                    coeffs: vec![1.0],
                    z: m.value,
                    w: m.weight,
                    source: k,
                });
            }
            MeasurementKind::InjP(b) | MeasurementKind::InjQ(b) => {
                let b = check_bus(b)?;
                let axis = if matches!(m.kind, MeasurementKind::InjP(_)) {
                    Axis::P
                } else {
                    Axis::Q
                };
                inj_rows.push((b.0, axis, rows.len()));
                rows.push(balance_row(net, &layout, b, axis, m.value, m.weight, k));
            }
            MeasurementKind::VirtualZeroInj(b, axis) => {
                let b = check_bus(b)?;
                inj_rows.push((b.0, axis, rows.len()));
                rows.push(balance_row(net, &layout, b, axis, 0.0, m.weight, k));
            }
            MeasurementKind::FlowP(e) | MeasurementKind::FlowQ(e) => {
                let e = check_end(e)?;
                let opp = net.opposite(e);
                let col = |end: EndIdx| match m.kind {
                    MeasurementKind::FlowP(_) => layout.col_p(end),
                    _ => layout.col_q(end),
                };
                // Direct reading at the measured end…
                rows.push(DesignRow {
                    cols: vec![col(e)],
                    coeffs: vec![1.0],
                    z: m.value,
                    w: m.weight,
                    source: k,
                });
                // …and the same value as the negated opposite direction.
                rows.push(DesignRow {
                    cols: vec![col(opp)],
                    coeffs: vec![-1.0],
                    z: m.value,
                    w: m.weight,
                    source: k,
                });
            }
            MeasurementKind::VirtualDrop(l) => {
                let l = check_line(l)?;
                let down = net.downhill_end(l);
                let end = net.end(down);
                let line = net.line(l);
                // v_sq(child) − v_sq(parent) + 2r·p + 2x·q = 0.
                rows.push(DesignRow {
                    cols: vec![
                        layout.col_v(end.to),
                        layout.col_v(end.from),
                        layout.col_p(down),
                        layout.col_q(down),
                    ],
                    coeffs: vec![1.0, -1.0, 2.0 * line.r, 2.0 * line.x],
                    z: 0.0,
                    w: m.weight,
                    source: k,
                });
            }
            MeasurementKind::VirtualAntisym(l, axis) => {
                let l = check_line(l)?;
                let down = net.downhill_end(l);
                let up = net.opposite(down);
                let col = |end: EndIdx| match axis {
                    Axis::P => layout.col_p(end),
                    Axis::Q => layout.col_q(end),
                };
                rows.push(DesignRow {
                    cols: vec![col(down), col(up)],
                    coeffs: vec![1.0, 1.0],
                    z: 0.0,
                    w: m.weight,
                    source: k,
                });
            }
        }
    }
    Ok(DesignSystem {
        rows,
        layout,
        inj_rows,
    })
}

/// Nodal-balance row: unit entries on every directed flow leaving `bus`.
fn balance_row(
    net: &NetworkModel,
    layout: &Layout,
    bus: BusIdx,
    axis: Axis,
    z: f64,
    w: f64,
    source: usize,
) -> DesignRow {
    let ends = net.ends_leaving(bus);
    let cols = ends
        .iter()
        .map(|&e| match axis {
            Axis::P => layout.col_p(e),
            Axis::Q => layout.col_q(e),
        })
        .collect::<Vec<_>>();
    DesignRow {
        cols,
        coeffs: vec![1.0; ends.len()],
        z,
        w,
        source,
    }
}

/// A solved estimate; `system` is retained so the post-filter can re-score
/// nodal balances against a possibly modified state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEstimate {
    pub state: StateVector,
    /// Unweighted residuals, one per design row.
    pub residuals: Vec<f64>,
    pub weighted_cost: f64,
    pub rank: usize,
    pub postfiltered: bool,
    pub system: DesignSystem,
}

/// Solves the weighted least-squares problem by column-pivoted QR.
pub fn solve_wls(sys: &DesignSystem) -> Result<StateEstimate> {
    for row in &sys.rows {
        let finite =
            row.z.is_finite() && row.w.is_finite() && row.coeffs.iter().all(|c| c.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                context: "design system entries".into(),
            });
        }
        if row.w < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "negative weight {} on row {}",
                row.w, row.source
            )));
        }
    }
    let (m, n) = (sys.n_rows(), sys.n_cols());
    sequential_kernels();
    let (a, b) = sys.scaled_dense();
    let qr = a.col_piv_qr();
    let (rank, _) = rank_and_ratio_from_r(qr.R(), m, n);
    if rank < n {
        return Err(Error::RankDeficient { rank, required: n });
    }
    let x = qr.solve_lstsq(&b);
    let flat: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "wls solution".into(),
        });
    }
    let residuals = sys.residuals(&flat);
    let weighted_cost = sys.weighted_cost(&residuals);
    Ok(StateEstimate {
        state: StateVector::unflatten(&sys.layout, &flat),
        residuals,
        weighted_cost,
        rank,
        postfiltered: false,
        system: sys.clone(),
    })
}

/// Repairs flow directions whose end-to-end sums are antisymmetry outliers.
///
/// For each line and axis where |flow(i→j) + flow(j→i)| exceeds `threshold`
/// times the network-wide mean absolute flow of that axis, the direction
/// whose nodal-balance residuals are worse is replaced by the negation of
/// the better one; scoreless directions count as worst, and ties replace the
/// child→parent entry. Voltage states are never touched.
pub fn postfilter_antisymmetry(
    est: &StateEstimate,
    net: &NetworkModel,
    threshold: f64,
) -> StateEstimate {
    let mut out = est.clone();
    out.postfiltered = true;
    if net.n_ends() == 0 {
        return out;
    }
    let layout = &est.system.layout;
    let mut flat = est.state.flatten(layout);
    let mean_of = |flows: &[f64]| flows.iter().map(|f| f.abs()).sum::<f64>() / flows.len() as f64;
    let mean = [mean_of(&est.state.flow_p), mean_of(&est.state.flow_q)];

    // Badness of assigning the current flows to `bus`'s balance rows.
    let score = |flat: &[f64], bus: BusIdx, axis: Axis| -> f64 {
        let mut total = f64::INFINITY;
        for &(b, a, row) in &est.system.inj_rows {
            if b == bus.0 && a == axis {
                let r = &est.system.rows[row];
                let miss = (r.z - r.dot(flat)).abs();
                total = if total.is_finite() {
                    total + miss
                } else {
                    miss
                };
            }
        }
        total
    };

    for l in 0..net.n_lines() {
        let down = net.downhill_end(crate::netmodel::LineIdx(l));
        let up = net.opposite(down);
        for (axis, mean) in [(Axis::P, mean[0]), (Axis::Q, mean[1])] {
            let col = |e: EndIdx| match axis {
                Axis::P => layout.col_p(e),
                Axis::Q => layout.col_q(e),
            };
            let mismatch = (flat[col(down)] + flat[col(up)]).abs();
            if mismatch <= threshold * mean {
                continue;
            }
            let parent_side = score(&flat, net.end(down).from, axis);
            let child_side = score(&flat, net.end(up).from, axis);
            if parent_side > child_side {
                flat[col(down)] = -flat[col(up)];
            } else {
                // Includes ties and the both-unscored case.
                flat[col(up)] = -flat[col(down)];
            }
        }
    }

    out.state = StateVector::unflatten(layout, &flat);
    out.residuals = est.system.residuals(&flat);
    out.weighted_cost = est.system.weighted_cost(&out.residuals);
    out
}

// ---------------------------------------------------------------------------
// Document form
// ---------------------------------------------------------------------------

/// Serialized estimate: the solution schema plus fit diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateDoc {
    pub v_sq: BTreeMap<String, f64>,
    pub flows: BTreeMap<String, LineFlowDoc>,
    pub residuals: Vec<f64>,
    pub weighted_cost: f64,
    pub rank: usize,
    pub postfiltered: bool,
}

impl StateEstimate {
    pub fn to_doc(&self, net: &NetworkModel) -> EstimateDoc {
        let v_sq = (0..net.n_buses())
            .map(|b| (net.bus(BusIdx(b)).id.clone(), self.state.v_sq[b]))
            .collect();
        let flows = (0..net.n_lines())
            .map(|l| {
                let line = net.line(crate::netmodel::LineIdx(l));
                let fwd = net.end_index(line.from, line.to).expect("line end");
                let rev = net.opposite(fwd);
                (
                    line.id.clone(),
                    LineFlowDoc {
                        forward: [self.state.flow_p[fwd.0], self.state.flow_q[fwd.0]],
                        reverse: [self.state.flow_p[rev.0], self.state.flow_q[rev.0]],
                    },
                )
            })
            .collect();
        EstimateDoc {
            v_sq,
            flows,
            residuals: self.residuals.clone(),
            weighted_cost: self.weighted_cost,
            rank: self.rank,
            postfiltered: self.postfiltered,
        }
    }

    /// Rebuilds an estimate from its document; the design system is not part
    /// of the document, so the result carries an empty one.
    pub fn from_doc(doc: &EstimateDoc, net: &NetworkModel) -> Result<Self> {
        let mut state = StateVector::zeros(net);
        for (id, &v) in &doc.v_sq {
            state.v_sq[net.bus_idx(id)?.0] = v;
        }
        if doc.v_sq.len() != net.n_buses() {
            return Err(Error::Parse {
                path: "estimate".into(),
                message: format!(
                    "expected {} bus entries, got {}",
                    net.n_buses(),
                    doc.v_sq.len()
                ),
            });
        }
        for (id, f) in &doc.flows {
            let line = net.line(net.line_idx(id)?);
            let fwd = net.end_index(line.from, line.to).expect("line end");
            let rev = net.opposite(fwd);
            state.flow_p[fwd.0] = f.forward[0];
            state.flow_q[fwd.0] = f.forward[1];
            state.flow_p[rev.0] = f.reverse[0];
            state.flow_q[rev.0] = f.reverse[1];
        }
        if doc.flows.len() != net.n_lines() {
            return Err(Error::Parse {
                path: "estimate".into(),
                message: format!(
                    "expected {} line entries, got {}",
                    net.n_lines(),
                    doc.flows.len()
                ),
            });
        }
        Ok(StateEstimate {
            state,
            residuals: doc.residuals.clone(),
            weighted_cost: doc.weighted_cost,
            rank: doc.rank,
            postfiltered: doc.postfiltered,
            system: DesignSystem::empty(net),
        })
    }

    pub fn save(&self, net: &NetworkModel, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_doc(net)).expect("schema serializes");
        crate::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path, net: &NetworkModel) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: EstimateDoc = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        StateEstimate::from_doc(&doc, net)
    }
}
