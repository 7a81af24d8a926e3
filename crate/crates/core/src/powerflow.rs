//! Radial power flow in squared voltage magnitudes, plus dispatch sampling.
//!
//! `solve_exact` runs the classic backward/forward sweep: the backward pass
//! accumulates branch flows including series losses, the forward pass pushes
//! voltages down from the slack. `solve_linear` is the lossless linear model
//! the estimator is built on: flows are sums of downstream demands and each
//! line drops 2(r p + x q) in squared magnitude.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::netmodel::{BusIdx, Dispatch, EndIdx, NetworkModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Linear,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Method::Exact),
            "linear" => Ok(Method::Linear),
            other => Err(Error::InvalidConfig(format!(
                "unknown method {other:?}, expected \"exact\" or \"linear\""
            ))),
        }
    }
}

/// Exact-sweep iteration control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Convergence threshold on the largest voltage-magnitude change.
    pub tol: f64,
    pub max_iter: u32,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

/// Power flow state: squared voltages per bus, flows per directed end.
/// A flow is positive when power leaves the named end into the line, so
/// the two entries of one line sum to its series loss (exact) or to zero
/// (linear).
#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub method: Method,
    pub converged: bool,
    pub iterations: u32,
    /// Squared voltage magnitude per bus index.
    pub v_sq: Vec<f64>,
    /// Active flow per directed end index.
    pub flow_p: Vec<f64>,
    /// Reactive flow per directed end index.
    pub flow_q: Vec<f64>,
}

impl PowerFlowSolution {
    /// Net injection implied at `bus`: the sum of flows leaving it.
    pub fn injection_at(&self, net: &NetworkModel, bus: BusIdx) -> (f64, f64) {
        let mut p = 0.0;
        let mut q = 0.0;
        for &e in net.ends_leaving(bus) {
            p += self.flow_p[e.0];
            q += self.flow_q[e.0];
        }
        (p, q)
    }

    /// Total series losses, summed per line from its two directed ends.
    pub fn losses(&self, net: &NetworkModel) -> (f64, f64) {
        let mut p = 0.0;
        let mut q = 0.0;
        for ends in net.ends().chunks_exact(2) {
            let a = net.end_index(ends[0].from, ends[0].to).expect("own end");
            let b = net.end_index(ends[1].from, ends[1].to).expect("own end");
            p += self.flow_p[a.0] + self.flow_p[b.0];
            q += self.flow_q[a.0] + self.flow_q[b.0];
        }
        (p, q)
    }

    pub fn to_doc(&self, net: &NetworkModel) -> SolutionDoc {
        let v_sq = net
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id.clone(), self.v_sq[i]))
            .collect();
        let flows = net
            .lines
            .iter()
            .map(|l| {
                let fwd = net.end_index(l.from, l.to).expect("line end");
                let rev = net.end_index(l.to, l.from).expect("line end");
                (
                    l.id.clone(),
                    LineFlowDoc {
                        forward: [self.flow_p[fwd.0], self.flow_q[fwd.0]],
                        reverse: [self.flow_p[rev.0], self.flow_q[rev.0]],
                    },
                )
            })
            .collect();
        SolutionDoc {
            method: self.method,
            converged: self.converged,
            iterations: self.iterations,
            v_sq,
            flows,
        }
    }

    pub fn from_doc(doc: &SolutionDoc, net: &NetworkModel) -> Result<Self> {
        let mut v_sq = vec![f64::NAN; net.n_buses()];
        for (id, v) in &doc.v_sq {
            v_sq[net.bus_idx(id)?.0] = *v;
        }
        let mut flow_p = vec![f64::NAN; net.n_ends()];
        let mut flow_q = vec![f64::NAN; net.n_ends()];
        for (id, flows) in &doc.flows {
            let line = net.line(net.line_idx(id)?);
            let fwd = net.end_index(line.from, line.to).expect("line end");
            let rev = net.end_index(line.to, line.from).expect("line end");
            flow_p[fwd.0] = flows.forward[0];
            flow_q[fwd.0] = flows.forward[1];
            flow_p[rev.0] = flows.reverse[0];
            flow_q[rev.0] = flows.reverse[1];
        }
        for (context, values) in [("v_sq", &v_sq), ("flow_p", &flow_p), ("flow_q", &flow_q)] {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("solution {context}: missing or non-finite entries"),
                });
            }
        }
        Ok(PowerFlowSolution {
            method: doc.method,
            converged: doc.converged,
            iterations: doc.iterations,
            v_sq,
            flow_p,
            flow_q,
        })
    }

    pub fn save(&self, net: &NetworkModel, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_doc(net)).expect("schema serializes");
        crate::write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>, net: &NetworkModel) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: SolutionDoc = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_doc(&doc, net)
    }
}

/// On-disk solution schema, keyed by bus and line ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionDoc {
    pub method: Method,
    pub converged: bool,
    pub iterations: u32,
    pub v_sq: BTreeMap<String, f64>,
    pub flows: BTreeMap<String, LineFlowDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineFlowDoc {
    pub forward: [f64; 2],
    pub reverse: [f64; 2],
}

/// How dispatches are sampled. Defaults match the study setup: loads scaled
/// uniformly in [0.5, 1.0], DG active power uniform in [0, capacity], DG
/// power factor anywhere between 0.95 lagging and 0.95 leading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispatchConfig {
    pub load_scale_min: f64,
    pub load_scale_max: f64,
    /// DG output is drawn uniform in [0, dg_scale_max * capacity].
    pub dg_scale_max: f64,
    /// Minimum DG power factor; reactive output follows from it.
    pub pf_min: f64,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        DispatchConfig {
            load_scale_min: 0.5,
            load_scale_max: 1.0,
            dg_scale_max: 1.0,
            pf_min: 0.95,
        }
    }
}

impl DispatchConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.load_scale_min.is_finite()
            && self.load_scale_max.is_finite()
            && 0.0 <= self.load_scale_min
            && self.load_scale_min <= self.load_scale_max
            && (0.0..=1.0).contains(&self.dg_scale_max)
            && self.pf_min > 0.0
            && self.pf_min <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "dispatch config out of range: {self:?}"
            )))
        }
    }
}

/// Samples one dispatch. Buses are visited in rooted order so the draw
/// sequence is fixed for a given network; generation never exceeds capacity.
pub fn generate_dispatch(
    net: &NetworkModel,
    cfg: &DispatchConfig,
    rng: &mut impl Rng,
) -> Result<Dispatch> {
    cfg.validate()?;
    let tan_max = (1.0 / (cfg.pf_min * cfg.pf_min) - 1.0).sqrt();
    let mut dispatch = Dispatch::zeros(net);
    for &bus_idx in net.rooted_order() {
        if bus_idx == net.slack() {
            continue;
        }
        let bus = net.bus(bus_idx);
        let mut p = 0.0;
        let mut q = 0.0;
        if bus.load_p != 0.0 || bus.load_q != 0.0 {
            let scale = if cfg.load_scale_min == cfg.load_scale_max {
                cfg.load_scale_min
            } else {
                rng.gen_range(cfg.load_scale_min..=cfg.load_scale_max)
            };
            p -= scale * bus.load_p;
            q -= scale * bus.load_q;
        }
        if bus.dg_capacity_p > 0.0 {
            let cap = cfg.dg_scale_max * bus.dg_capacity_p;
            let gen = if cap > 0.0 {
                rng.gen_range(0.0..=cap)
            } else {
                0.0
            };
            let tan = if tan_max > 0.0 {
                rng.gen_range(-tan_max..=tan_max)
            } else {
                0.0
            };
            dispatch.gen_p[bus_idx.0] = gen;
            p += gen;
            q += gen * tan;
        }
        dispatch.inj_p[bus_idx.0] = p;
        dispatch.inj_q[bus_idx.0] = q;
    }
    Ok(dispatch)
}

/// Exact radial power flow by backward/forward sweep.
pub fn solve_exact(
    net: &NetworkModel,
    dispatch: &Dispatch,
    opts: &SolveOptions,
) -> Result<PowerFlowSolution> {
    let n = net.n_buses();
    let mut v_sq = vec![1.0; n];
    // Per line, in rooted orientation: receiving-end flow into the child,
    // squared current, sending-end flow out of the parent.
    let nl = net.n_lines();
    let mut recv_p = vec![0.0; nl];
    let mut recv_q = vec![0.0; nl];
    let mut ell = vec![0.0; nl];
    let mut send_p = vec![0.0; nl];
    let mut send_q = vec![0.0; nl];

    let mut iterations = 0;
    let mut last_change = f64::INFINITY;
    while iterations < opts.max_iter {
        iterations += 1;
        // Backward: accumulate subtree demand; the squared current uses the
        // receiving-end voltage of the current iterate.
        for &bus in net.rooted_order().iter().rev() {
            let Some((_, line_idx)) = net.parent(bus) else {
                continue;
            };
            let mut p = -dispatch.inj_p[bus.0];
            let mut q = -dispatch.inj_q[bus.0];
            for &(_, child_line) in net.children(bus) {
                p += send_p[child_line.0];
                q += send_q[child_line.0];
            }
            let line = net.line(line_idx);
            let cur = (p * p + q * q) / v_sq[bus.0];
            recv_p[line_idx.0] = p;
            recv_q[line_idx.0] = q;
            ell[line_idx.0] = cur;
            send_p[line_idx.0] = p + line.r * cur;
            send_q[line_idx.0] = q + line.x * cur;
        }
        // Forward: push voltages from the slack.
        last_change = 0.0;
        for &bus in net.rooted_order() {
            let Some((parent, line_idx)) = net.parent(bus) else {
                continue;
            };
            let line = net.line(line_idx);
            let z_sq = line.r * line.r + line.x * line.x;
            let v_new = v_sq[parent.0]
                - 2.0 * (line.r * send_p[line_idx.0] + line.x * send_q[line_idx.0])
                + z_sq * ell[line_idx.0];
            // Also trips on NaN, which never compares greater than zero.
            if v_new.is_nan() || v_new <= 0.0 {
                return Err(Error::VoltageCollapse {
                    bus: net.bus(bus).id.clone(),
                    v_sq: v_new,
                });
            }
            let change = (v_new.sqrt() - v_sq[bus.0].sqrt()).abs();
            if change > last_change {
                last_change = change;
            }
            v_sq[bus.0] = v_new;
        }
        if last_change < opts.tol {
            return Ok(assemble_solution(
                net,
                Method::Exact,
                iterations,
                v_sq,
                &recv_p,
                &recv_q,
                &send_p,
                &send_q,
            ));
        }
    }
    Err(Error::NonConvergence {
        iterations,
        last_change,
    })
}

/// Lossless linear power flow: flows are sums of downstream net demands,
/// squared voltages drop by 2(r p + x q) per line. Solved directly.
pub fn solve_linear(net: &NetworkModel, dispatch: &Dispatch) -> PowerFlowSolution {
    let nl = net.n_lines();
    let mut flow = vec![(0.0, 0.0); nl];
    for &bus in net.rooted_order().iter().rev() {
        let Some((_, line_idx)) = net.parent(bus) else {
            continue;
        };
        let mut p = -dispatch.inj_p[bus.0];
        let mut q = -dispatch.inj_q[bus.0];
        for &(_, child_line) in net.children(bus) {
            p += flow[child_line.0].0;
            q += flow[child_line.0].1;
        }
        flow[line_idx.0] = (p, q);
    }
    let mut v_sq = vec![1.0; net.n_buses()];
    for &bus in net.rooted_order() {
        let Some((parent, line_idx)) = net.parent(bus) else {
            continue;
        };
        let line = net.line(line_idx);
        let (p, q) = flow[line_idx.0];
        v_sq[bus.0] = v_sq[parent.0] - 2.0 * (line.r * p + line.x * q);
    }
    let sends: Vec<f64> = flow.iter().map(|f| f.0).collect();
    let sends_q: Vec<f64> = flow.iter().map(|f| f.1).collect();
    // Lossless: the receiving end sees exactly what the sending end put in.
    assemble_solution(
        net,
        Method::Linear,
        0,
        v_sq,
        &sends,
        &sends_q,
        &sends,
        &sends_q,
    )
}

/// Maps per-line rooted-orientation flows onto directed ends. The parent end
/// sends `send`, the child end sends the negated received flow.
#[allow(clippy::too_many_arguments)]
fn assemble_solution(
    net: &NetworkModel,
    method: Method,
    iterations: u32,
    v_sq: Vec<f64>,
    recv_p: &[f64],
    recv_q: &[f64],
    send_p: &[f64],
    send_q: &[f64],
) -> PowerFlowSolution {
    let mut flow_p = vec![0.0; net.n_ends()];
    let mut flow_q = vec![0.0; net.n_ends()];
    for &bus in net.rooted_order() {
        let Some((parent, line_idx)) = net.parent(bus) else {
            continue;
        };
        let down: EndIdx = net.end_index(parent, bus).expect("line end");
        let up: EndIdx = net.end_index(bus, parent).expect("line end");
        flow_p[down.0] = send_p[line_idx.0];
        flow_q[down.0] = send_q[line_idx.0];
        flow_p[up.0] = -recv_p[line_idx.0];
        flow_q[up.0] = -recv_q[line_idx.0];
    }
    PowerFlowSolution {
        method,
        converged: true,
        iterations,
        v_sq,
        flow_p,
        flow_q,
    }
}
