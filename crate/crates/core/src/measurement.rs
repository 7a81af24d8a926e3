//! Noisy magnitude-measurement synthesis, preference-driven selection, and
//! observability checking.
//!
//! A [`MeasurementPool`] holds one noisy candidate per measurable quantity;
//! [`select_set`] draws an observable subset under a nodal or edge
//! preference, resampling with fresh sub-streams on rank deficiency.

use crate::netmodel::{BusIdx, EndIdx, LineIdx, NetworkModel};
use crate::powerflow::PowerFlowSolution;
use crate::rng::{stream, Purpose};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Weight of structural (virtual) rows; physical weights are capped here.
pub const VIRTUAL_WEIGHT: f64 = 1e6;

/// Injections smaller than this count as zero for pseudo-measurement rows.
const ZERO_INJ_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Uniform,
    Gaussian,
}

impl std::str::FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Distribution::Uniform),
            "gaussian" => Ok(Distribution::Gaussian),
            other => Err(Error::Parse {
                path: "distribution".into(),
                message: format!("expected uniform|gaussian, got {other:?}"),
            }),
        }
    }
}

/// Relative error bounds for synthesized magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub e_v: f64,
    pub e_i: f64,
    #[serde(default = "NoiseConfig::default_distribution")]
    pub distribution: Distribution,
    /// Gaussian mode draws with σ = bound · factor, truncated at ±bound.
    #[serde(default = "NoiseConfig::default_sigma_factor")]
    pub gaussian_sigma_factor: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            e_v: 0.0,
            e_i: 0.0,
            distribution: Distribution::Uniform,
            gaussian_sigma_factor: 1.0 / 3.0,
        }
    }
}

impl NoiseConfig {
    fn default_distribution() -> Distribution {
        Distribution::Uniform
    }

    fn default_sigma_factor() -> f64 {
        1.0 / 3.0
    }

    pub fn uniform(e_v: f64, e_i: f64) -> Result<Self> {
        let cfg = NoiseConfig {
            e_v,
            e_i,
            ..NoiseConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, e) in [("e_v", self.e_v), ("e_i", self.e_i)] {
            if !(0.0..=0.05).contains(&e) {
                return Err(Error::InvalidConfig(format!(
                    "{name} = {e} outside [0, 0.05]"
                )));
            }
        }
        if !(self.gaussian_sigma_factor > 0.0 && self.gaussian_sigma_factor <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gaussian_sigma_factor = {} outside (0, 1]",
                self.gaussian_sigma_factor
            )));
        }
        Ok(())
    }

    /// One relative-error draw bounded by `bound`.
    fn draw<R: Rng>(&self, bound: f64, rng: &mut R) -> f64 {
        if bound == 0.0 {
            // Keep the stream aligned so e = 0 consumes like e > 0.
            let _ = rng.gen::<f64>();
            return 0.0;
        }
        match self.distribution {
            Distribution::Uniform => rng.gen_range(-bound..=bound),
            Distribution::Gaussian => {
                let sigma = bound * self.gaussian_sigma_factor;
                loop {
                    let normal = rand_distr::Normal::new(0.0, sigma).expect("validated sigma");
                    let v = rng.sample(normal);
                    if v.abs() <= bound {
                        return v;
                    }
                }
            }
        }
    }

    /// Effective relative bound on a squared-voltage measurement.
    pub fn v_sq_bound(&self) -> f64 {
        (1.0 + self.e_v) * (1.0 + self.e_v) - 1.0
    }

    /// Effective relative bound on a power measurement (both factors).
    pub fn power_bound(&self) -> f64 {
        self.e_v + self.e_i + self.e_v * self.e_i
    }

    /// Standard deviation implied by a relative bound under this distribution.
    pub fn sigma_for(&self, bound: f64) -> f64 {
        match self.distribution {
            Distribution::Uniform => bound / 3.0_f64.sqrt(),
            Distribution::Gaussian => bound * self.gaussian_sigma_factor,
        }
    }
}

/// Inverse-variance weight for a class sigma, capped at [`VIRTUAL_WEIGHT`].
fn class_weight(sigma: f64) -> f64 {
    if sigma <= 0.0 {
        VIRTUAL_WEIGHT
    } else {
        (1.0 / (sigma * sigma)).min(VIRTUAL_WEIGHT)
    }
}

/// Active or reactive axis of a structural row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    P,
    Q,
}

/// What one measurement row observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MeasurementKind {
    /// Squared voltage magnitude at a bus.
    VSq(BusIdx),
    /// Net active injection at a bus.
    InjP(BusIdx),
    /// Net reactive injection at a bus.
    InjQ(BusIdx),
    /// Active flow at a directed line end.
    FlowP(EndIdx),
    /// Reactive flow at a directed line end.
    FlowQ(EndIdx),
    /// Structural voltage-drop identity along a line (parent→child).
    VirtualDrop(LineIdx),
    /// Structural zero-injection balance at a bus.
    VirtualZeroInj(BusIdx, Axis),
    /// Structural end-to-end flow antisymmetry on a line (optional).
    VirtualAntisym(LineIdx, Axis),
}

impl MeasurementKind {
    pub fn is_virtual(&self) -> bool {
        matches!(
            self,
            MeasurementKind::VirtualDrop(_)
                | MeasurementKind::VirtualZeroInj(..)
                | MeasurementKind::VirtualAntisym(..)
        )
    }
}

/// One selected measurement: a kind, its measured value, and its weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub kind: MeasurementKind,
    /// Per-unit measured value; always zero for virtual rows.
    pub value: f64,
    pub weight: f64,
    /// Class standard deviation behind the weight; zero for virtual rows.
    pub sigma: f64,
}

impl Measurement {
    fn virtual_row(kind: MeasurementKind) -> Measurement {
        debug_assert!(kind.is_virtual());
        Measurement {
            kind,
            value: 0.0,
            weight: VIRTUAL_WEIGHT,
            sigma: 0.0,
        }
    }
}

/// Full candidate pool: one noisy value per measurable quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementPool {
    /// Noisy squared voltage per bus.
    pub v_sq: Vec<f64>,
    /// Noisy net injections per bus.
    pub inj_p: Vec<f64>,
    pub inj_q: Vec<f64>,
    /// Noisy directed flows per end.
    pub flow_p: Vec<f64>,
    pub flow_q: Vec<f64>,
    /// True (noise-free) injection is zero at this non-slack bus.
    pub zero_inj: Vec<bool>,
    /// Class sigmas implied by the noise configuration.
    pub sigma_v_sq: f64,
    pub sigma_power: f64,
}

/// Synthesizes the full measurement candidate pool from a converged truth.
///
/// Draw order is fixed — buses in index order (v, then p, then q), then ends
/// in index order (p, then q) — so a seed pins every candidate.
pub fn synthesize_pool<R: Rng>(
    truth: &PowerFlowSolution,
    net: &NetworkModel,
    noise: &NoiseConfig,
    rng: &mut R,
) -> Result<MeasurementPool> {
    noise.validate()?;
    if !truth.converged {
        return Err(Error::InvalidConfig(
            "measurement synthesis needs a converged truth solution".into(),
        ));
    }
    let mut pool = MeasurementPool {
        v_sq: Vec::with_capacity(net.n_buses()),
        inj_p: Vec::with_capacity(net.n_buses()),
        inj_q: Vec::with_capacity(net.n_buses()),
        flow_p: Vec::with_capacity(net.n_ends()),
        flow_q: Vec::with_capacity(net.n_ends()),
        zero_inj: vec![false; net.n_buses()],
        sigma_v_sq: noise.sigma_for(noise.v_sq_bound()),
        sigma_power: noise.sigma_for(noise.power_bound()),
    };
    let noisy_power = |truth: f64, rng: &mut R| {
        truth * (1.0 + noise.draw(noise.e_v, rng)) * (1.0 + noise.draw(noise.e_i, rng))
    };
    for b in 0..net.n_buses() {
        let v = truth.v_sq[b].sqrt();
        let noisy_v = v * (1.0 + noise.draw(noise.e_v, rng));
        pool.v_sq.push(noisy_v * noisy_v);
        let (p, q) = truth.injection_at(net, BusIdx(b));
        pool.inj_p.push(noisy_power(p, rng));
        pool.inj_q.push(noisy_power(q, rng));
        pool.zero_inj[b] =
            BusIdx(b) != net.slack() && p.abs() < ZERO_INJ_EPS && q.abs() < ZERO_INJ_EPS;
    }
    for e in 0..net.n_ends() {
        pool.flow_p.push(noisy_power(truth.flow_p[e], rng));
        pool.flow_q.push(noisy_power(truth.flow_q[e], rng));
    }
    Ok(pool)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preference {
    Nodal,
    Edge,
}

impl Preference {
    /// Default (node_fraction, flow_fraction) for this preference.
    pub fn default_fractions(self) -> (f64, f64) {
        match self {
            Preference::Nodal => (0.60, 0.80),
            Preference::Edge => (0.30, 0.90),
        }
    }
}

impl std::str::FromStr for Preference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nodal" => Ok(Preference::Nodal),
            "edge" => Ok(Preference::Edge),
            other => Err(Error::Parse {
                path: "preference".into(),
                message: format!("expected nodal|edge, got {other:?}"),
            }),
        }
    }
}

/// Selection policy for [`select_set`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectOptions {
    pub preference: Preference,
    /// Explicit (node_fraction, flow_fraction); `None` uses the preference
    /// defaults.
    pub fractions: Option<(f64, f64)>,
    pub max_resamples: u32,
    /// Emit structural antisymmetry rows for every line (off by default).
    pub include_antisym: bool,
}

impl Default for SelectOptions {
    fn default() -> Self {
        SelectOptions {
            preference: Preference::Nodal,
            fractions: None,
            max_resamples: 40,
            include_antisym: false,
        }
    }
}

impl SelectOptions {
    pub fn nodal() -> Self {
        SelectOptions::default()
    }

    pub fn edge() -> Self {
        SelectOptions {
            preference: Preference::Edge,
            ..SelectOptions::default()
        }
    }

    pub fn fractions(&self) -> (f64, f64) {
        self.fractions
            .unwrap_or_else(|| self.preference.default_fractions())
    }

    fn validate(&self) -> Result<()> {
        let (nf, ff) = self.fractions();
        for (name, f) in [("node_fraction", nf), ("flow_fraction", ff)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidConfig(format!("{name} = {f} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// An observable measurement selection plus how it was drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub measurements: Vec<Measurement>,
    pub preference: Preference,
    pub node_fraction: f64,
    pub flow_fraction: f64,
    pub master_seed: u64,
    pub run_index: u64,
    /// Selection rounds discarded for rank deficiency before this set.
    pub resamples_used: u32,
}

/// Draws one candidate selection for a given resampling round.
fn draw_candidate(
    pool: &MeasurementPool,
    net: &NetworkModel,
    opts: &SelectOptions,
    master_seed: u64,
    run_index: u64,
    round: u32,
) -> MeasurementSet {
    let (node_fraction, flow_fraction) = opts.fractions();
    let mut rng = stream(master_seed, run_index, Purpose::Select(round));
    let mut ms = Vec::new();

    // Always-present rows: slack voltage, every drop identity, and the
    // zero-injection balances.
    ms.push(Measurement {
        kind: MeasurementKind::VSq(net.slack()),
        value: pool.v_sq[net.slack().0],
        weight: class_weight(pool.sigma_v_sq),
        sigma: pool.sigma_v_sq,
    });
    for l in 0..net.n_lines() {
        ms.push(Measurement::virtual_row(MeasurementKind::VirtualDrop(
            LineIdx(l),
        )));
    }
    for b in 0..net.n_buses() {
        if pool.zero_inj[b] {
            for axis in [Axis::P, Axis::Q] {
                ms.push(Measurement::virtual_row(MeasurementKind::VirtualZeroInj(
                    BusIdx(b),
                    axis,
                )));
            }
        }
    }
    if opts.include_antisym {
        for l in 0..net.n_lines() {
            for axis in [Axis::P, Axis::Q] {
                ms.push(Measurement::virtual_row(MeasurementKind::VirtualAntisym(
                    LineIdx(l),
                    axis,
                )));
            }
        }
    }

    // Sampled nodal measurements: a voltage plus both injections per bus.
    let non_slack: Vec<BusIdx> = (0..net.n_buses())
        .map(BusIdx)
        .filter(|&b| b != net.slack())
        .collect();
    let n_nodes = (node_fraction * non_slack.len() as f64).ceil() as usize;
    let mut picked = rand::seq::index::sample(&mut rng, non_slack.len(), n_nodes).into_vec();
    picked.sort_unstable();
    let w_pow = class_weight(pool.sigma_power);
    for i in picked {
        let b = non_slack[i];
        ms.push(Measurement {
            kind: MeasurementKind::VSq(b),
            value: pool.v_sq[b.0],
            weight: class_weight(pool.sigma_v_sq),
            sigma: pool.sigma_v_sq,
        });
        ms.push(Measurement {
            kind: MeasurementKind::InjP(b),
            value: pool.inj_p[b.0],
            weight: w_pow,
            sigma: pool.sigma_power,
        });
        ms.push(Measurement {
            kind: MeasurementKind::InjQ(b),
            value: pool.inj_q[b.0],
            weight: w_pow,
            sigma: pool.sigma_power,
        });
    }

    // Sampled edge measurements: both flow axes per directed end.
    let n_flows = (flow_fraction * net.n_ends() as f64).ceil() as usize;
    let mut picked = rand::seq::index::sample(&mut rng, net.n_ends(), n_flows).into_vec();
    picked.sort_unstable();
    for e in picked {
        ms.push(Measurement {
            kind: MeasurementKind::FlowP(EndIdx(e)),
            value: pool.flow_p[e],
            weight: w_pow,
            sigma: pool.sigma_power,
        });
        ms.push(Measurement {
            kind: MeasurementKind::FlowQ(EndIdx(e)),
            value: pool.flow_q[e],
            weight: w_pow,
            sigma: pool.sigma_power,
        });
    }

    MeasurementSet {
        measurements: ms,
        preference: opts.preference,
        node_fraction,
        flow_fraction,
        master_seed,
        run_index,
        resamples_used: round,
    }
}

/// Selects an observable measurement set, resampling on rank deficiency or
/// near-singular conditioning.
pub fn select_set(
    pool: &MeasurementPool,
    net: &NetworkModel,
    opts: &SelectOptions,
    master_seed: u64,
    run_index: u64,
) -> Result<MeasurementSet> {
    opts.validate()?;
    let mut last_rank = 0;
    for round in 0..=opts.max_resamples {
        let set = draw_candidate(pool, net, opts, master_seed, run_index, round);
        let obs = check_observability(net, &set)?;
        if obs.observable {
            return Ok(set);
        }
        last_rank = obs.rank;
    }
    Err(Error::Unobservable {
        rank: last_rank,
        required: net.state_dim(),
        resamples: Some(opts.max_resamples),
    })
}

/// Outcome of a numerical observability check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Observability {
    pub observable: bool,
    pub rank: usize,
    pub state_dim: usize,
}

/// Smallest acceptable min/max diagonal ratio of the design factorization.
///
/// A set can be full rank by the machine-epsilon test yet so ill-conditioned
/// that a solve amplifies measurement noise by factors of 1e8; such draws sit
/// many decades below well-posed ones (observed ~1e-8 versus ~1e-2 on the
/// bundled feeder), so any floor in the gap rejects exactly the degenerate
/// geometries and sends selection back for a resample.
const DIAG_RATIO_FLOOR: f64 = 1e-6;

/// Ranks the assembled design matrix against the state dimension.
///
/// A set counts as observable only when it is full rank *and* the
/// factorization clears [`DIAG_RATIO_FLOOR`], so selection never accepts a
/// draw whose estimates would be dominated by conditioning error.
pub fn check_observability(net: &NetworkModel, set: &MeasurementSet) -> Result<Observability> {
    let sys = crate::estimator::assemble(net, set)?;
    let (rank, ratio) = sys.rank_and_diag_ratio();
    Ok(Observability {
        observable: rank == net.state_dim() && ratio >= DIAG_RATIO_FLOOR,
        rank,
        state_dim: net.state_dim(),
    })
}

// ---------------------------------------------------------------------------
// Document form
// ---------------------------------------------------------------------------

/// Serialized measurement entry; `target` is a bus id, a line id, or a
/// directed end written `from->to`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementDoc {
    pub kind: String,
    pub target: String,
    pub value: f64,
    pub weight: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSetDoc {
    pub preference: Preference,
    pub node_fraction: f64,
    pub flow_fraction: f64,
    pub master_seed: u64,
    pub run_index: u64,
    pub resamples_used: u32,
    pub measurements: Vec<MeasurementDoc>,
}

impl MeasurementSet {
    pub fn to_doc(&self, net: &NetworkModel) -> MeasurementSetDoc {
        let entry = |m: &Measurement| {
            let (kind, target) = match m.kind {
                MeasurementKind::VSq(b) => ("v_sq", net.bus(b).id.clone()),
                MeasurementKind::InjP(b) => ("inj_p", net.bus(b).id.clone()),
                MeasurementKind::InjQ(b) => ("inj_q", net.bus(b).id.clone()),
                MeasurementKind::FlowP(e) => ("flow_p", end_target(net, e)),
                MeasurementKind::FlowQ(e) => ("flow_q", end_target(net, e)),
                MeasurementKind::VirtualDrop(l) => ("virtual_drop", net.line(l).id.clone()),
                MeasurementKind::VirtualZeroInj(b, Axis::P) => {
                    ("virtual_zero_inj_p", net.bus(b).id.clone())
                }
                MeasurementKind::VirtualZeroInj(b, Axis::Q) => {
                    ("virtual_zero_inj_q", net.bus(b).id.clone())
                }
                MeasurementKind::VirtualAntisym(l, Axis::P) => {
                    ("virtual_antisym_p", net.line(l).id.clone())
                }
                MeasurementKind::VirtualAntisym(l, Axis::Q) => {
                    ("virtual_antisym_q", net.line(l).id.clone())
                }
            };
            MeasurementDoc {
                kind: kind.to_string(),
                target,
                value: m.value,
                weight: m.weight,
                sigma: m.sigma,
            }
        };
        MeasurementSetDoc {
            preference: self.preference,
            node_fraction: self.node_fraction,
            flow_fraction: self.flow_fraction,
            master_seed: self.master_seed,
            run_index: self.run_index,
            resamples_used: self.resamples_used,
            measurements: self.measurements.iter().map(entry).collect(),
        }
    }

    pub fn from_doc(doc: &MeasurementSetDoc, net: &NetworkModel) -> Result<Self> {
        let kind_of = |d: &MeasurementDoc| -> Result<MeasurementKind> {
            Ok(match d.kind.as_str() {
                "v_sq" => MeasurementKind::VSq(net.bus_idx(&d.target)?),
                "inj_p" => MeasurementKind::InjP(net.bus_idx(&d.target)?),
                "inj_q" => MeasurementKind::InjQ(net.bus_idx(&d.target)?),
                "flow_p" => MeasurementKind::FlowP(parse_end(net, &d.target)?),
                "flow_q" => MeasurementKind::FlowQ(parse_end(net, &d.target)?),
                "virtual_drop" => MeasurementKind::VirtualDrop(net.line_idx(&d.target)?),
                "virtual_zero_inj_p" => {
                    MeasurementKind::VirtualZeroInj(net.bus_idx(&d.target)?, Axis::P)
                }
                "virtual_zero_inj_q" => {
                    MeasurementKind::VirtualZeroInj(net.bus_idx(&d.target)?, Axis::Q)
                }
                "virtual_antisym_p" => {
                    MeasurementKind::VirtualAntisym(net.line_idx(&d.target)?, Axis::P)
                }
                "virtual_antisym_q" => {
                    MeasurementKind::VirtualAntisym(net.line_idx(&d.target)?, Axis::Q)
                }
                other => {
                    return Err(Error::Parse {
                        path: "measurement set".into(),
                        message: format!("unknown measurement kind {other:?}"),
                    })
                }
            })
        };
        let mut measurements = Vec::with_capacity(doc.measurements.len());
        for d in &doc.measurements {
            let kind = kind_of(d)?;
            if kind.is_virtual() && d.value != 0.0 {
                return Err(Error::Parse {
                    path: "measurement set".into(),
                    message: format!(
                        "virtual row {} {} carries nonzero value {}",
                        d.kind, d.target, d.value
                    ),
                });
            }
            measurements.push(Measurement {
                kind,
                value: d.value,
                weight: d.weight,
                sigma: d.sigma,
            });
        }
        Ok(MeasurementSet {
            measurements,
            preference: doc.preference,
            node_fraction: doc.node_fraction,
            flow_fraction: doc.flow_fraction,
            master_seed: doc.master_seed,
            run_index: doc.run_index,
            resamples_used: doc.resamples_used,
        })
    }

    pub fn save(&self, net: &NetworkModel, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_doc(net)).expect("schema serializes");
        crate::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path, net: &NetworkModel) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: MeasurementSetDoc = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        MeasurementSet::from_doc(&doc, net)
    }
}

fn end_target(net: &NetworkModel, e: EndIdx) -> String {
    let end = net.end(e);
    format!("{}->{}", net.bus(end.from).id, net.bus(end.to).id)
}

fn parse_end(net: &NetworkModel, target: &str) -> Result<EndIdx> {
    let (from, to) = target.split_once("->").ok_or_else(|| Error::Parse {
        path: "measurement set".into(),
        message: format!("directed end {target:?} is not of the form from->to"),
    })?;
    let from_idx = net.bus_idx(from)?;
    let to_idx = net.bus_idx(to)?;
    net.end_index(from_idx, to_idx)
        .ok_or_else(|| Error::UnknownEnd {
            from: from.to_string(),
            to: to.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::testnet::{chain3, random_tree};
    use crate::powerflow::{generate_dispatch, solve_exact, DispatchConfig, SolveOptions};
    use crate::rng::{stream, Purpose};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pool_for(
        net: &NetworkModel,
        noise: &NoiseConfig,
        seed: u64,
    ) -> (PowerFlowSolution, MeasurementPool) {
        let mut rng = stream(seed, 0, Purpose::Dispatch);
        let dispatch = generate_dispatch(net, &DispatchConfig::default(), &mut rng).unwrap();
        let truth = solve_exact(net, &dispatch, &SolveOptions::default()).unwrap();
        let mut rng = stream(seed, 0, Purpose::Noise);
        let pool = synthesize_pool(&truth, net, noise, &mut rng).unwrap();
        (truth, pool)
    }

    #[test]
    fn zero_noise_pool_reproduces_truth() {
        let net = random_tree(11, 9);
        let (truth, pool) = pool_for(&net, &NoiseConfig::default(), 5);
        for b in 0..net.n_buses() {
            assert_relative_eq!(pool.v_sq[b], truth.v_sq[b], max_relative = 1e-15);
            let (p, q) = truth.injection_at(&net, BusIdx(b));
            assert_eq!(pool.inj_p[b], p);
            assert_eq!(pool.inj_q[b], q);
        }
        assert_eq!(pool.flow_p, truth.flow_p);
        assert_eq!(pool.flow_q, truth.flow_q);
    }

    #[test]
    fn uniform_noise_respects_bounds() {
        let net = random_tree(23, 14);
        let noise = NoiseConfig::uniform(0.01, 0.006).unwrap();
        let (truth, pool) = pool_for(&net, &noise, 7);
        let v_bound = noise.v_sq_bound();
        let p_bound = noise.power_bound();
        for b in 0..net.n_buses() {
            let rel = (pool.v_sq[b] - truth.v_sq[b]).abs() / truth.v_sq[b];
            assert!(rel <= v_bound + 1e-15, "v_sq off by {rel}");
            let (p, _) = truth.injection_at(&net, BusIdx(b));
            if p.abs() > 0.0 {
                let rel = (pool.inj_p[b] - p).abs() / p.abs();
                assert!(rel <= p_bound + 1e-15, "inj_p off by {rel}");
            }
        }
        for e in 0..net.n_ends() {
            let t = truth.flow_p[e];
            if t.abs() > 0.0 {
                let rel = (pool.flow_p[e] - t).abs() / t.abs();
                assert!(rel <= p_bound + 1e-15, "flow_p off by {rel}");
            }
        }
    }

    #[test]
    fn gaussian_noise_truncates_at_bounds() {
        let net = random_tree(31, 10);
        let noise = NoiseConfig {
            e_v: 0.01,
            e_i: 0.01,
            distribution: Distribution::Gaussian,
            gaussian_sigma_factor: 1.0 / 3.0,
        };
        let (truth, pool) = pool_for(&net, &noise, 11);
        let v_bound = noise.v_sq_bound();
        for b in 0..net.n_buses() {
            let rel = (pool.v_sq[b] - truth.v_sq[b]).abs() / truth.v_sq[b];
            assert!(rel <= v_bound + 1e-15);
        }
    }

    #[test]
    fn pool_is_deterministic_per_seed() {
        let net = random_tree(17, 12);
        let noise = NoiseConfig::uniform(0.003, 0.001).unwrap();
        let (_, a) = pool_for(&net, &noise, 42);
        let (_, b) = pool_for(&net, &noise, 42);
        let (_, c) = pool_for(&net, &noise, 43);
        assert_eq!(a, b);
        assert_ne!(a.v_sq, c.v_sq);
    }

    #[test]
    fn zero_injection_buses_are_flagged() {
        // chain3's middle bus draws DG, so force a zero-injection dispatch
        // by solving with no generation and no load at b1.
        let net = chain3();
        let mut dispatch = crate::netmodel::Dispatch::zeros(&net);
        let b2 = net.bus_idx("b2").unwrap();
        dispatch.inj_p[b2.0] = -0.1;
        dispatch.inj_q[b2.0] = -0.05;
        let truth = solve_exact(&net, &dispatch, &SolveOptions::default()).unwrap();
        let mut rng = stream(1, 0, Purpose::Noise);
        let pool = synthesize_pool(&truth, &net, &NoiseConfig::default(), &mut rng).unwrap();
        let b1 = net.bus_idx("b1").unwrap();
        assert!(pool.zero_inj[b1.0]);
        assert!(!pool.zero_inj[b2.0]);
        assert!(!pool.zero_inj[net.slack().0], "slack never gets the row");
    }

    #[test]
    fn selection_counts_honor_fractions() {
        let net = random_tree(37, 20);
        let noise = NoiseConfig::uniform(0.001, 0.001).unwrap();
        let (_, pool) = pool_for(&net, &noise, 3);
        let set = select_set(&pool, &net, &SelectOptions::nodal(), 3, 0).unwrap();
        let n_non_slack = net.n_buses() - 1;
        let want_buses = (0.60 * n_non_slack as f64).ceil() as usize;
        let want_ends = (0.80 * net.n_ends() as f64).ceil() as usize;
        let count = |pred: &dyn Fn(&MeasurementKind) -> bool| {
            set.measurements.iter().filter(|m| pred(&m.kind)).count()
        };
        assert_eq!(
            count(&|k| matches!(k, MeasurementKind::VSq(_))),
            1 + want_buses
        );
        assert_eq!(
            count(&|k| matches!(k, MeasurementKind::InjP(_))),
            want_buses
        );
        assert_eq!(
            count(&|k| matches!(k, MeasurementKind::FlowP(_))),
            want_ends
        );
        assert_eq!(
            count(&|k| matches!(k, MeasurementKind::FlowQ(_))),
            want_ends
        );
        assert_eq!(
            count(&|k| matches!(k, MeasurementKind::VirtualDrop(_))),
            net.n_lines()
        );
        let slack_rows = set
            .measurements
            .iter()
            .filter(|m| m.kind == MeasurementKind::VSq(net.slack()))
            .count();
        assert_eq!(slack_rows, 1, "exactly one slack voltage row");
    }

    #[test]
    fn selection_is_deterministic_per_seed() {
        let net = random_tree(53, 16);
        let noise = NoiseConfig::uniform(0.001, 0.003).unwrap();
        let (_, pool) = pool_for(&net, &noise, 9);
        let a = select_set(&pool, &net, &SelectOptions::edge(), 9, 4).unwrap();
        let b = select_set(&pool, &net, &SelectOptions::edge(), 9, 4).unwrap();
        assert_eq!(a, b);
        let c = select_set(&pool, &net, &SelectOptions::edge(), 9, 5).unwrap();
        assert_ne!(a.measurements, c.measurements);
    }

    #[test]
    fn full_fractions_are_always_observable() {
        let net = random_tree(61, 13);
        let noise = NoiseConfig::uniform(0.001, 0.001).unwrap();
        let (_, pool) = pool_for(&net, &noise, 2);
        let opts = SelectOptions {
            fractions: Some((1.0, 1.0)),
            max_resamples: 0,
            ..SelectOptions::nodal()
        };
        let set = select_set(&pool, &net, &opts, 2, 0).unwrap();
        let obs = check_observability(&net, &set).unwrap();
        assert!(obs.observable);
        assert_eq!(obs.rank, net.state_dim());
        assert_eq!(set.resamples_used, 0);
    }

    #[test]
    fn empty_fractions_fail_observability() {
        let net = chain3();
        let mut dispatch = crate::netmodel::Dispatch::zeros(&net);
        let b2 = net.bus_idx("b2").unwrap();
        dispatch.inj_p[b2.0] = -0.1;
        dispatch.inj_q[b2.0] = -0.05;
        let truth = solve_exact(&net, &dispatch, &SolveOptions::default()).unwrap();
        let mut rng = stream(6, 0, Purpose::Noise);
        let pool = synthesize_pool(&truth, &net, &NoiseConfig::default(), &mut rng).unwrap();
        let opts = SelectOptions {
            fractions: Some((0.0, 0.0)),
            max_resamples: 2,
            ..SelectOptions::nodal()
        };
        let err = select_set(&pool, &net, &opts, 6, 0).unwrap_err();
        match err {
            Error::Unobservable {
                rank,
                required,
                resamples,
            } => {
                // Slack voltage + two drop rows + b1's two balance rows.
                assert_eq!(rank, 5);
                assert_eq!(required, 11);
                assert_eq!(resamples, Some(2));
            }
            other => panic!("expected Unobservable, got {other}"),
        }
    }

    #[test]
    fn set_document_round_trip() {
        let net = random_tree(71, 11);
        let noise = NoiseConfig::uniform(0.006, 0.01).unwrap();
        let (_, pool) = pool_for(&net, &noise, 8);
        let opts = SelectOptions {
            include_antisym: true,
            ..SelectOptions::edge()
        };
        let set = select_set(&pool, &net, &opts, 8, 1).unwrap();
        let doc = set.to_doc(&net);
        let text = serde_json::to_string(&doc).unwrap();
        let parsed: MeasurementSetDoc = serde_json::from_str(&text).unwrap();
        let back = MeasurementSet::from_doc(&parsed, &net).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn noise_bounds_reject_out_of_range() {
        assert!(NoiseConfig::uniform(0.06, 0.0).is_err());
        assert!(NoiseConfig::uniform(0.0, -0.001).is_err());
        assert!(NoiseConfig::uniform(0.05, 0.05).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_uniform_noise_never_exceeds_bounds(
            seed in 0u64..1000,
            e_v in 0.0f64..0.05,
            e_i in 0.0f64..0.05,
        ) {
            let net = random_tree(97, 9);
            let noise = NoiseConfig::uniform(e_v, e_i).unwrap();
            let (truth, pool) = pool_for(&net, &noise, seed);
            let p_bound = noise.power_bound();
            for e in 0..net.n_ends() {
                let t = truth.flow_p[e];
                if t.abs() > 0.0 {
                    let rel = (pool.flow_p[e] - t).abs() / t.abs();
                    prop_assert!(rel <= p_bound + 1e-12);
                }
            }
            for b in 0..net.n_buses() {
                let rel =
                    (pool.v_sq[b] - truth.v_sq[b]).abs() / truth.v_sq[b];
                prop_assert!(rel <= noise.v_sq_bound() + 1e-12);
            }
        }
    }
}
