//! Monte Carlo experiment harness: seeded scenario runs, error statistics,
//! and the 4×4 noise-grid tables.
//!
//! A scenario fixes noise bounds and a selection preference; each dispatch
//! index drives an independent seeded pipeline (dispatch → truth → noisy
//! pool → selection → WLS → optional post-filter). Statistics are averages
//! of per-run statistics and are invariant to worker count because every run
//! draws from its own RNG streams and reduction happens in index order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimator::{assemble, postfilter_antisymmetry, solve_wls, StateVector};
use crate::measurement::{
    select_set, synthesize_pool, Distribution, NoiseConfig, Preference, SelectOptions,
};
use crate::netmodel::NetworkModel;
use crate::powerflow::{
    generate_dispatch, solve_exact, solve_linear, DispatchConfig, Method, PowerFlowSolution,
    SolveOptions,
};
use crate::rng::{scenario_seed, stream, Purpose};
use crate::{write_atomic, Error, Result};

/// How per-element errors are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the class-wide mean absolute true value (default; keeps
    /// near-zero flows from exploding the statistic).
    ClassMean,
    /// Divide each element by its own absolute true value.
    PerElement,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_mean" => Ok(Normalization::ClassMean),
            "per_element" => Ok(Normalization::PerElement),
            other => Err(Error::Parse {
                path: "normalization".into(),
                message: format!("expected class_mean|per_element, got {other:?}"),
            }),
        }
    }
}

/// Full specification of one Monte Carlo scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub noise: NoiseConfig,
    pub preference: Preference,
    /// Explicit (node_fraction, flow_fraction); `None` uses preference
    /// defaults.
    pub fractions: Option<(f64, f64)>,
    pub dispatch_count: u32,
    pub master_seed: u64,
    pub postfilter: bool,
    pub postfilter_threshold: f64,
    pub normalization: Normalization,
    /// Which solver produces the ground truth (exact in the study; linear
    /// closes the consistency loop in tests).
    pub truth_method: Method,
    pub max_resamples: u32,
    pub dispatch: DispatchConfig,
    pub solve: SolveOptions,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            noise: NoiseConfig::default(),
            preference: Preference::Nodal,
            fractions: None,
            dispatch_count: 1500,
            master_seed: 0,
            postfilter: false,
            postfilter_threshold: 0.15,
            normalization: Normalization::ClassMean,
            truth_method: Method::Exact,
            max_resamples: 40,
            dispatch: DispatchConfig::default(),
            solve: SolveOptions::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.dispatch.validate()?;
        if self.dispatch_count == 0 {
            return Err(Error::InvalidConfig("dispatch_count must be ≥ 1".into()));
        }
        if self.postfilter_threshold.is_nan() || self.postfilter_threshold < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "postfilter_threshold = {} must be ≥ 0",
                self.postfilter_threshold
            )));
        }
        Ok(())
    }

    fn select_options(&self) -> SelectOptions {
        SelectOptions {
            preference: self.preference,
            fractions: self.fractions,
            max_resamples: self.max_resamples,
            include_antisym: false,
        }
    }
}

/// Error statistics of a single run, normalized per the scenario config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunErrors {
    pub mean_err_v: f64,
    pub max_err_v: f64,
    pub mean_err_f: f64,
    pub max_err_f: f64,
    /// Directed flow entries whose error exceeds 5× this run's mean flow
    /// error.
    pub outlier_count: u32,
    pub resamples_used: u32,
}

/// Aggregated statistics of one scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStats {
    pub avg_of_mean_v: f64,
    pub avg_of_max_v: f64,
    pub avg_of_mean_f: f64,
    pub avg_of_max_f: f64,
    /// Runs contributing to the averages.
    pub run_count: u32,
    /// Runs dropped for estimation failures (≤ 1% or the scenario aborts).
    pub failed_runs: u32,
    /// 95% normal-approximation half-widths of the four averages.
    pub ci_mean_v: f64,
    pub ci_max_v: f64,
    pub ci_mean_f: f64,
    pub ci_max_f: f64,
    /// Median per-run outlier count.
    pub outlier_median: f64,
    /// Fraction of runs whose first selection draw was already observable.
    pub resample_free_fraction: f64,
    pub avg_resamples: f64,
}

/// Normalized error statistics of `estimate` against `truth`.
pub fn evaluate_errors(
    truth: &PowerFlowSolution,
    estimate: &StateVector,
    normalization: Normalization,
    resamples_used: u32,
) -> RunErrors {
    // Voltage errors are taken on magnitudes, not squares.
    let v_true: Vec<f64> = truth.v_sq.iter().map(|v| v.sqrt()).collect();
    let v_est: Vec<f64> = estimate.v_sq.iter().map(|v| v.sqrt()).collect();
    let v_err = normalized_errors(&v_true, &v_est, normalization);

    let f_true: Vec<f64> = truth.flow_p.iter().chain(&truth.flow_q).copied().collect();
    let f_est: Vec<f64> = estimate
        .flow_p
        .iter()
        .chain(&estimate.flow_q)
        .copied()
        .collect();
    let f_err = normalized_errors(&f_true, &f_est, normalization);

    let stats = |errs: &[f64]| {
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let max = errs.iter().fold(0.0f64, |m, &e| m.max(e));
        (mean, max)
    };
    let (mean_err_v, max_err_v) = stats(&v_err);
    let (mean_err_f, max_err_f) = stats(&f_err);
    let outlier_count = f_err.iter().filter(|&&e| e > 5.0 * mean_err_f).count() as u32;
    RunErrors {
        mean_err_v,
        max_err_v,
        mean_err_f,
        max_err_f,
        outlier_count,
        resamples_used,
    }
}

fn normalized_errors(truth: &[f64], est: &[f64], normalization: Normalization) -> Vec<f64> {
    match normalization {
        Normalization::ClassMean => {
            let scale = truth.iter().map(|t| t.abs()).sum::<f64>() / truth.len() as f64;
            truth
                .iter()
                .zip(est)
                .map(|(t, e)| (e - t).abs() / scale)
                .collect()
        }
        Normalization::PerElement => truth
            .iter()
            .zip(est)
            .map(|(t, e)| (e - t).abs() / t.abs())
            .collect(),
    }
}

/// Runs the full estimation pipeline for one dispatch index.
pub fn run_one(net: &NetworkModel, cfg: &ScenarioConfig, dispatch_index: u64) -> Result<RunErrors> {
    run_one_inner(net, cfg, dispatch_index).map_err(|e| e.in_run(dispatch_index))
}

fn run_one_inner(
    net: &NetworkModel,
    cfg: &ScenarioConfig,
    dispatch_index: u64,
) -> Result<RunErrors> {
    let mut rng = stream(cfg.master_seed, dispatch_index, Purpose::Dispatch);
    let dispatch = generate_dispatch(net, &cfg.dispatch, &mut rng)?;
    let truth = match cfg.truth_method {
        Method::Exact => solve_exact(net, &dispatch, &cfg.solve)?,
        Method::Linear => solve_linear(net, &dispatch),
    };
    let mut rng = stream(cfg.master_seed, dispatch_index, Purpose::Noise);
    let pool = synthesize_pool(&truth, net, &cfg.noise, &mut rng)?;
    let set = select_set(
        &pool,
        net,
        &cfg.select_options(),
        cfg.master_seed,
        dispatch_index,
    )?;
    let resamples_used = set.resamples_used;
    let sys = assemble(net, &set)?;
    let mut est = solve_wls(&sys)?;
    if cfg.postfilter {
        est = postfilter_antisymmetry(&est, net, cfg.postfilter_threshold);
    }
    Ok(evaluate_errors(
        &truth,
        &est.state,
        cfg.normalization,
        resamples_used,
    ))
}

/// Runs `cfg.dispatch_count` seeded pipelines and aggregates the statistics.
///
/// Runs execute in parallel on the ambient rayon pool; results are reduced
/// in dispatch-index order, so statistics do not depend on worker count.
pub fn run_scenario(net: &NetworkModel, cfg: &ScenarioConfig) -> Result<ScenarioStats> {
    cfg.validate()?;
    let outcomes: Vec<Result<RunErrors>> = (0..cfg.dispatch_count as u64)
        .into_par_iter()
        .map(|i| run_one(net, cfg, i))
        .collect();

    let total = outcomes.len();
    let failed = outcomes.iter().filter(|o| o.is_err()).count();
    if failed * 100 > total {
        let first = outcomes
            .into_iter()
            .find_map(|o| o.err())
            .expect("at least one failure");
        return Err(Error::TooManyFailures {
            failed,
            total,
            first: Box::new(first),
        });
    }
    let runs: Vec<RunErrors> = outcomes.into_iter().filter_map(|o| o.ok()).collect();
    Ok(aggregate(&runs, failed as u32))
}

/// Mean and 95% normal-approximation half-width of `f` over the runs.
fn mean_and_ci(runs: &[RunErrors], f: impl Fn(&RunErrors) -> f64) -> (f64, f64) {
    let n = runs.len() as f64;
    let mean = runs.iter().map(&f).sum::<f64>() / n;
    if runs.len() < 2 {
        return (mean, 0.0);
    }
    let var = runs.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

fn aggregate(runs: &[RunErrors], failed_runs: u32) -> ScenarioStats {
    let n = runs.len() as f64;
    let (avg_of_mean_v, ci_mean_v) = mean_and_ci(runs, |r| r.mean_err_v);
    let (avg_of_max_v, ci_max_v) = mean_and_ci(runs, |r| r.max_err_v);
    let (avg_of_mean_f, ci_mean_f) = mean_and_ci(runs, |r| r.mean_err_f);
    let (avg_of_max_f, ci_max_f) = mean_and_ci(runs, |r| r.max_err_f);

    let mut outliers: Vec<u32> = runs.iter().map(|r| r.outlier_count).collect();
    outliers.sort_unstable();
    let outlier_median = if outliers.is_empty() {
        0.0
    } else if outliers.len() % 2 == 1 {
        outliers[outliers.len() / 2] as f64
    } else {
        (outliers[outliers.len() / 2 - 1] + outliers[outliers.len() / 2]) as f64 / 2.0
    };
    let resample_free = runs.iter().filter(|r| r.resamples_used == 0).count() as f64 / n;
    let (avg_resamples, _) = mean_and_ci(runs, |r| f64::from(r.resamples_used));

    ScenarioStats {
        avg_of_mean_v,
        avg_of_max_v,
        avg_of_mean_f,
        avg_of_max_f,
        run_count: runs.len() as u32,
        failed_runs,
        ci_mean_v,
        ci_max_v,
        ci_mean_f,
        ci_max_f,
        outlier_median,
        resample_free_fraction: resample_free,
        avg_resamples,
    }
}

// ---------------------------------------------------------------------------
// Grid runner
// ---------------------------------------------------------------------------

/// Configuration of a full noise grid (defaults reproduce the 32-scenario
/// study: four voltage × four current error levels × two preferences).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub e_v_list: Vec<f64>,
    pub e_i_list: Vec<f64>,
    pub preferences: Vec<Preference>,
    pub dispatch_count: u32,
    pub master_seed: u64,
    /// Explicit [node_fraction, flow_fraction] override for both preferences.
    pub fractions: Option<(f64, f64)>,
    pub postfilter: bool,
    pub postfilter_threshold: f64,
    pub normalization: Normalization,
    pub distribution: Distribution,
    pub max_resamples: u32,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            e_v_list: vec![0.001, 0.003, 0.006, 0.01],
            e_i_list: vec![0.001, 0.003, 0.006, 0.01],
            preferences: vec![Preference::Nodal, Preference::Edge],
            dispatch_count: 1500,
            master_seed: 0,
            fractions: None,
            postfilter: false,
            postfilter_threshold: 0.15,
            normalization: Normalization::ClassMean,
            distribution: Distribution::Uniform,
            max_resamples: 40,
        }
    }
}

impl GridConfig {
    pub fn load(path: &Path) -> Result<GridConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.e_v_list.is_empty() || self.e_i_list.is_empty() || self.preferences.is_empty() {
            return Err(Error::InvalidConfig(
                "grid needs at least one e_v, e_i, and preference".into(),
            ));
        }
        self.scenario(0).validate()
    }

    /// Total number of scenario cells.
    pub fn n_cells(&self) -> usize {
        self.preferences.len() * self.e_i_list.len() * self.e_v_list.len()
    }

    /// The scenario at flat index `k`, enumerated preference-major, then
    /// e_i rows, then e_v columns; each gets its own derived master seed.
    pub fn scenario(&self, k: usize) -> ScenarioConfig {
        let per_pref = self.e_i_list.len() * self.e_v_list.len();
        let pref = self.preferences[k / per_pref];
        let rem = k % per_pref;
        let e_i = self.e_i_list[rem / self.e_v_list.len()];
        let e_v = self.e_v_list[rem % self.e_v_list.len()];
        ScenarioConfig {
            noise: NoiseConfig {
                e_v,
                e_i,
                distribution: self.distribution,
                ..NoiseConfig::default()
            },
            preference: pref,
            fractions: self.fractions,
            dispatch_count: self.dispatch_count,
            master_seed: scenario_seed(self.master_seed, k as u32),
            postfilter: self.postfilter,
            postfilter_threshold: self.postfilter_threshold,
            normalization: self.normalization,
            max_resamples: self.max_resamples,
            ..ScenarioConfig::default()
        }
    }
}

/// Outcome of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellOutcome {
    pub scenario_index: usize,
    pub preference: Preference,
    pub e_v: f64,
    pub e_i: f64,
    pub seed: u64,
    pub stats: Option<ScenarioStats>,
    pub error: Option<String>,
}

/// Everything a grid run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSummary {
    pub cells: Vec<CellOutcome>,
    pub files: Vec<PathBuf>,
}

impl GridSummary {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }
}

/// Extracts one emitted statistic from a scenario.
type StatFn = fn(&ScenarioStats) -> f64;

/// The four emitted statistics.
const STATS: [(&str, StatFn); 4] = [
    ("avg_mean_v", |s| s.avg_of_mean_v),
    ("avg_max_v", |s| s.avg_of_max_v),
    ("avg_mean_f", |s| s.avg_of_mean_f),
    ("avg_max_f", |s| s.avg_of_max_f),
];

/// Runs every cell of the grid and writes tables, markdown, and a sidecar.
///
/// Failed cells are marked in the emitted tables rather than aborting the
/// grid; I/O failures abort.
pub fn run_grid(net: &NetworkModel, cfg: &GridConfig, out_dir: &Path) -> Result<GridSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut cells = Vec::with_capacity(cfg.n_cells());
    for k in 0..cfg.n_cells() {
        let scenario = cfg.scenario(k);
        let (stats, error) = match run_scenario(net, &scenario) {
            Ok(s) => (Some(s), None),
            Err(e) => (None, Some(e.to_string())),
        };
        cells.push(CellOutcome {
            scenario_index: k,
            preference: scenario.preference,
            e_v: scenario.noise.e_v,
            e_i: scenario.noise.e_i,
            seed: scenario.master_seed,
            stats,
            error,
        });
    }

    let mut files = Vec::new();
    for &pref in &cfg.preferences {
        let pref_name = match pref {
            Preference::Nodal => "nodal",
            Preference::Edge => "edge",
        };
        for (stat_name, extract) in STATS {
            let cell_text = |e_i: f64, e_v: f64, digits: usize| -> String {
                let cell = cells
                    .iter()
                    .find(|c| c.preference == pref && c.e_i == e_i && c.e_v == e_v)
                    .expect("cell enumerated");
                match (&cell.stats, &cell.error) {
                    (Some(s), _) => format!("{:.*}", digits, extract(s) * 100.0),
                    (None, _) => "FAILED".to_string(),
                }
            };

            let csv_path = out_dir.join(format!("table_{stat_name}_{pref_name}.csv"));
            let mut csv = String::new();
            let _ = write!(csv, "e_i\\e_v");
            for &e_v in &cfg.e_v_list {
                let _ = write!(csv, ",{}", pct_label(e_v));
            }
            csv.push('\n');
            for &e_i in &cfg.e_i_list {
                let _ = write!(csv, "{}", pct_label(e_i));
                for &e_v in &cfg.e_v_list {
                    let _ = write!(csv, ",{}", cell_text(e_i, e_v, 6));
                }
                csv.push('\n');
            }
            write_atomic(&csv_path, csv.as_bytes())?;
            files.push(csv_path);

            let md_path = out_dir.join(format!("table_{stat_name}_{pref_name}.md"));
            let mut md = String::new();
            let _ = writeln!(
                md,
                "Percent {} ({} preference)",
                stat_name.replace('_', " "),
                pref_name
            );
            let _ = write!(md, "\n| e_i \\ e_v |");
            for &e_v in &cfg.e_v_list {
                let _ = write!(md, " {} |", pct_label(e_v));
            }
            md.push('\n');
            let _ = write!(md, "|---|");
            for _ in &cfg.e_v_list {
                let _ = write!(md, "---|");
            }
            md.push('\n');
            for &e_i in &cfg.e_i_list {
                let _ = write!(md, "| {} |", pct_label(e_i));
                for &e_v in &cfg.e_v_list {
                    let _ = write!(md, " {} |", cell_text(e_i, e_v, 4));
                }
                md.push('\n');
            }
            write_atomic(&md_path, md.as_bytes())?;
            files.push(md_path);
        }
    }

    let sidecar_path = out_dir.join("sidecar.json");
    let sidecar = Sidecar {
        config: cfg.clone(),
        cells: &cells,
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("schema serializes");
    write_atomic(&sidecar_path, text.as_bytes())?;
    files.push(sidecar_path);

    Ok(GridSummary { cells, files })
}

#[derive(Serialize)]
struct Sidecar<'a> {
    config: GridConfig,
    cells: &'a [CellOutcome],
}

/// Percent label with trailing zeros trimmed: 0.001 → "0.1", 0.01 → "1".
fn pct_label(e: f64) -> String {
    let s = format!("{:.6}", e * 100.0);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::testnet::random_tree;
    use approx::assert_abs_diff_eq;

    fn consistency_cfg() -> ScenarioConfig {
        ScenarioConfig {
            fractions: Some((1.0, 1.0)),
            truth_method: Method::Linear,
            dispatch_count: 1,
            master_seed: 3,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn zero_noise_linear_truth_errors_vanish() {
        let net = random_tree(5, 12);
        let errs = run_one(&net, &consistency_cfg(), 0).unwrap();
        assert!(errs.mean_err_v < 1e-8, "mean_v {}", errs.mean_err_v);
        assert!(errs.max_err_v < 1e-8, "max_v {}", errs.max_err_v);
        assert!(errs.mean_err_f < 1e-8, "mean_f {}", errs.mean_err_f);
        assert!(errs.max_err_f < 1e-8, "max_f {}", errs.max_err_f);
    }

    #[test]
    fn zero_noise_exact_truth_shows_linearization_gap() {
        let net = random_tree(7, 14);
        let cfg = ScenarioConfig {
            truth_method: Method::Exact,
            ..consistency_cfg()
        };
        let errs = run_one(&net, &cfg, 0).unwrap();
        assert!(errs.mean_err_v > 1e-12, "gap should be nonzero");
        assert!(
            errs.mean_err_v < 0.01,
            "gap stays small: {}",
            errs.mean_err_v
        );
        assert!(errs.max_err_f < 0.5);
    }

    #[test]
    fn run_errors_are_bit_reproducible() {
        let net = random_tree(11, 16);
        let cfg = ScenarioConfig {
            noise: NoiseConfig::uniform(0.001, 0.001).unwrap(),
            master_seed: 9,
            ..ScenarioConfig::default()
        };
        let a = run_one(&net, &cfg, 4).unwrap();
        let b = run_one(&net, &cfg, 4).unwrap();
        assert_eq!(a, b);
        let c = run_one(&net, &cfg, 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn max_dominates_mean_in_each_class() {
        let net = random_tree(13, 12);
        let cfg = ScenarioConfig {
            noise: NoiseConfig::uniform(0.01, 0.01).unwrap(),
            master_seed: 2,
            ..ScenarioConfig::default()
        };
        for i in 0..20 {
            let e = run_one(&net, &cfg, i).unwrap();
            assert!(e.max_err_v >= e.mean_err_v && e.mean_err_v >= 0.0);
            assert!(e.max_err_f >= e.mean_err_f && e.mean_err_f >= 0.0);
        }
    }

    #[test]
    fn high_noise_runs_on_bundled_feeder_stay_bounded() {
        // This seeded window includes draws that are full rank only
        // nominally; selection's conditioning floor must resample them
        // instead of letting the solve amplify noise by ~1e8.
        let net = crate::netmodel::NetworkModel::load(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../fixtures/ieee123_balanced.json"
        ))
        .unwrap();
        let cfg = ScenarioConfig {
            noise: NoiseConfig::uniform(0.01, 0.01).unwrap(),
            ..ScenarioConfig::default()
        };
        let mut resamples = 0;
        for i in 140..160 {
            let e = run_one(&net, &cfg, i).unwrap();
            assert!(e.max_err_f < 1.0, "run {i}: max_err_f {}", e.max_err_f);
            resamples += e.resamples_used;
        }
        assert!(resamples > 0, "window should exercise the resample path");
    }

    #[test]
    fn single_run_scenario_equals_that_run() {
        let net = random_tree(17, 10);
        let cfg = ScenarioConfig {
            noise: NoiseConfig::uniform(0.003, 0.006).unwrap(),
            dispatch_count: 1,
            master_seed: 21,
            ..ScenarioConfig::default()
        };
        let stats = run_scenario(&net, &cfg).unwrap();
        let run = run_one(&net, &cfg, 0).unwrap();
        assert_eq!(stats.run_count, 1);
        assert_abs_diff_eq!(stats.avg_of_mean_v, run.mean_err_v);
        assert_abs_diff_eq!(stats.avg_of_max_v, run.max_err_v);
        assert_abs_diff_eq!(stats.avg_of_mean_f, run.mean_err_f);
        assert_abs_diff_eq!(stats.avg_of_max_f, run.max_err_f);
        assert_eq!(stats.ci_mean_v, 0.0, "one run has no spread");
    }

    #[test]
    fn scenario_stats_ignore_worker_count() {
        let net = random_tree(19, 14);
        let cfg = ScenarioConfig {
            noise: NoiseConfig::uniform(0.006, 0.001).unwrap(),
            dispatch_count: 12,
            master_seed: 31,
            ..ScenarioConfig::default()
        };
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| run_scenario(&net, &cfg))
            .unwrap();
        let multi = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| run_scenario(&net, &cfg))
            .unwrap();
        assert_eq!(single, multi);
    }

    #[test]
    fn hopeless_observability_aborts_with_failure_report() {
        let net = random_tree(23, 8);
        let cfg = ScenarioConfig {
            fractions: Some((0.0, 0.0)),
            max_resamples: 0,
            dispatch_count: 4,
            master_seed: 1,
            ..ScenarioConfig::default()
        };
        let err = run_scenario(&net, &cfg).unwrap_err();
        match err {
            Error::TooManyFailures {
                failed,
                total,
                first,
            } => {
                assert_eq!(failed, 4);
                assert_eq!(total, 4);
                assert!(matches!(*first, Error::Run { index: 0, .. }));
            }
            other => panic!("expected TooManyFailures, got {other}"),
        }
    }

    #[test]
    fn grid_writes_eight_tables_and_sidecar() {
        let net = random_tree(29, 10);
        let cfg = GridConfig {
            e_v_list: vec![0.001],
            e_i_list: vec![0.001],
            dispatch_count: 2,
            master_seed: 5,
            ..GridConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let summary = run_grid(&net, &cfg, dir.path()).unwrap();
        assert_eq!(summary.failed_cells(), 0);
        assert_eq!(summary.cells.len(), 2, "one cell per preference");
        // 2 preferences × 4 statistics × (csv + md) + sidecar.
        assert_eq!(summary.files.len(), 17);
        for f in &summary.files {
            assert!(f.exists(), "{} missing", f.display());
        }
        let csv = std::fs::read_to_string(dir.path().join("table_avg_mean_v_nodal.csv")).unwrap();
        assert!(csv.starts_with("e_i\\e_v,0.1\n0.1,"), "csv was: {csv}");
    }

    #[test]
    fn grid_output_is_byte_identical_across_runs() {
        let net = random_tree(31, 9);
        let cfg = GridConfig {
            e_v_list: vec![0.001, 0.01],
            e_i_list: vec![0.003],
            dispatch_count: 2,
            master_seed: 77,
            ..GridConfig::default()
        };
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        run_grid(&net, &cfg, da.path()).unwrap();
        run_grid(&net, &cfg, db.path()).unwrap();
        for entry in std::fs::read_dir(da.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(da.path().join(&name)).unwrap();
            let b = std::fs::read(db.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name:?} differs between runs");
        }
    }

    #[test]
    fn failed_cells_are_marked_not_fatal() {
        let net = random_tree(37, 8);
        let cfg = GridConfig {
            e_v_list: vec![0.001],
            e_i_list: vec![0.001],
            preferences: vec![Preference::Nodal],
            dispatch_count: 2,
            master_seed: 1,
            fractions: Some((0.0, 0.0)),
            max_resamples: 0,
            ..GridConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let summary = run_grid(&net, &cfg, dir.path()).unwrap();
        assert_eq!(summary.failed_cells(), 1);
        let csv = std::fs::read_to_string(dir.path().join("table_avg_mean_v_nodal.csv")).unwrap();
        assert!(csv.contains("FAILED"));
        let sidecar = std::fs::read_to_string(dir.path().join("sidecar.json")).unwrap();
        assert!(sidecar.contains("error"));
    }

    #[test]
    fn scenario_enumeration_matches_table_layout() {
        let cfg = GridConfig::default();
        assert_eq!(cfg.n_cells(), 32);
        let s0 = cfg.scenario(0);
        assert_eq!(s0.preference, Preference::Nodal);
        assert_eq!((s0.noise.e_i, s0.noise.e_v), (0.001, 0.001));
        let s3 = cfg.scenario(3);
        assert_eq!((s3.noise.e_i, s3.noise.e_v), (0.001, 0.01));
        let s4 = cfg.scenario(4);
        assert_eq!((s4.noise.e_i, s4.noise.e_v), (0.003, 0.001));
        let s16 = cfg.scenario(16);
        assert_eq!(s16.preference, Preference::Edge);
        let seeds: std::collections::BTreeSet<u64> =
            (0..32).map(|k| cfg.scenario(k).master_seed).collect();
        assert_eq!(seeds.len(), 32, "per-cell seeds are distinct");
    }

    #[test]
    fn pct_labels_trim_cleanly() {
        assert_eq!(pct_label(0.001), "0.1");
        assert_eq!(pct_label(0.003), "0.3");
        assert_eq!(pct_label(0.006), "0.6");
        assert_eq!(pct_label(0.01), "1");
    }
}
