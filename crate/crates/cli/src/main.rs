//! Command-line surface: validate networks, solve power flows, run single
//! estimations, and produce full Monte Carlo noise grids.
//!
//! Exit codes: 0 success, 1 validation/domain error, 2 usage error (bad
//! flags or missing input files). Artifacts are written atomically and
//! re-ingest cleanly through the library loaders.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use dsse::estimator::{assemble, postfilter_antisymmetry, solve_wls};
use dsse::harness::{evaluate_errors, run_grid, GridConfig, Normalization};
use dsse::measurement::{
    select_set, synthesize_pool, Distribution, NoiseConfig, Preference, SelectOptions,
};
use dsse::netmodel::{validate_radial, Dispatch, NetworkDoc, NetworkModel};
use dsse::powerflow::{generate_dispatch, solve_exact, solve_linear, Method, SolveOptions};
use dsse::rng::{stream, Purpose};
use dsse::write_atomic;

#[derive(Parser)]
#[command(
    name = "dsse",
    version,
    about = "Angle-free state estimation workflows for radial feeders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for parallel sections (0 = all cores). Results never
    /// depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Suppress progress chatter on stderr.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a network file and report structural findings.
    Check {
        #[arg(long)]
        network: PathBuf,
    },
    /// Solve a power flow and write the solution document.
    Solve {
        #[arg(long)]
        network: PathBuf,
        /// Dispatch document (bus id -> [p, q] in per-unit); omit to sample
        /// one from --seed/--index.
        #[arg(long)]
        dispatch: Option<PathBuf>,
        #[arg(long, default_value = "exact")]
        method: Method,
        /// Master seed for sampled dispatches.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Index of the sampled dispatch within the seed's stream.
        #[arg(long, default_value_t = 0)]
        index: u64,
        /// Exact-solver iteration cap.
        #[arg(long, default_value_t = 100)]
        max_iter: u32,
        /// Exact-solver convergence tolerance on voltage magnitudes.
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate states from synthesized measurements of a truth solution.
    Estimate {
        #[arg(long)]
        network: PathBuf,
        /// Truth solution document (as written by `solve`).
        #[arg(long)]
        truth: PathBuf,
        /// Relative voltage-magnitude error bound.
        #[arg(long, default_value_t = 0.0)]
        ev: f64,
        /// Relative current-magnitude error bound.
        #[arg(long, default_value_t = 0.0)]
        ei: f64,
        #[arg(long, default_value = "uniform")]
        distribution: Distribution,
        #[arg(long, default_value = "nodal")]
        preference: Preference,
        /// Fraction of non-slack buses carrying meters (with --flow-fraction;
        /// both or neither).
        #[arg(long, requires = "flow_fraction")]
        node_fraction: Option<f64>,
        /// Fraction of directed ends carrying flow meters.
        #[arg(long, requires = "node_fraction")]
        flow_fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run index within the seed's stream.
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long, default_value_t = 40)]
        max_resamples: u32,
        /// Repair antisymmetry outliers after the solve.
        #[arg(long)]
        postfilter: bool,
        /// Mismatch threshold of the post-filter, relative to mean |flow|.
        #[arg(long, default_value_t = 0.15)]
        threshold: f64,
        /// Error normalization: class_mean or per_element.
        #[arg(long, default_value = "class_mean")]
        normalization: Normalization,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scenario grid and write its tables, markdown, and sidecar.
    Grid {
        #[arg(long)]
        network: PathBuf,
        /// Grid configuration document; omit for the full default study.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed; overrides the config file when given.
        #[arg(long)]
        seed: Option<u64>,
        /// Dispatches per scenario; overrides the config file when given.
        #[arg(long)]
        dispatches: Option<u32>,
        /// Enable the antisymmetry post-filter; overrides the config file.
        #[arg(long)]
        postfilter: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Command failure carrying its exit code class.
enum CmdError {
    /// Bad invocation: unknown flags (clap handles those) or missing files.
    Usage(String),
    /// The inputs were readable but the domain rejected them.
    Domain(String),
}

impl From<dsse::Error> for CmdError {
    fn from(e: dsse::Error) -> Self {
        CmdError::Domain(e.to_string())
    }
}

type CmdResult = Result<(), CmdError>;

fn require_file(path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CmdError::Usage(format!("no such file: {}", path.display())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        // Applies to every parallel section; results are scheduling-invariant.
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .expect("worker pool configured once at startup");
    }
    let outcome = match cli.command {
        Command::Check { ref network } => cmd_check(network, cli.quiet),
        Command::Solve {
            ref network,
            ref dispatch,
            method,
            seed,
            index,
            max_iter,
            tol,
            ref out,
        } => cmd_solve(
            network,
            dispatch.as_deref(),
            method,
            seed,
            index,
            SolveOptions { tol, max_iter },
            out,
            cli.quiet,
        ),
        Command::Estimate {
            ref network,
            ref truth,
            ev,
            ei,
            distribution,
            preference,
            node_fraction,
            flow_fraction,
            seed,
            index,
            max_resamples,
            postfilter,
            threshold,
            normalization,
            ref out,
        } => cmd_estimate(EstimateArgs {
            network,
            truth,
            ev,
            ei,
            distribution,
            preference,
            fractions: node_fraction.zip(flow_fraction),
            seed,
            index,
            max_resamples,
            postfilter,
            threshold,
            normalization,
            out,
            quiet: cli.quiet,
        }),
        Command::Grid {
            ref network,
            ref config,
            seed,
            dispatches,
            postfilter,
            ref out_dir,
        } => cmd_grid(
            network,
            config.as_deref(),
            seed,
            dispatches,
            postfilter,
            out_dir,
            cli.quiet,
        ),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CmdError::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn cmd_check(network: &Path, quiet: bool) -> CmdResult {
    require_file(network)?;
    let text = std::fs::read_to_string(network)
        .map_err(|e| CmdError::Domain(format!("{}: {e}", network.display())))?;
    let doc: NetworkDoc = serde_json::from_str(&text)
        .map_err(|e| CmdError::Domain(format!("malformed network {}: {e}", network.display())))?;
    let findings = validate_radial(&doc);
    if findings.is_empty() {
        let net = NetworkModel::from_doc(doc)?;
        if !quiet {
            println!("{} buses, {} lines", net.n_buses(), net.n_lines());
        }
        Ok(())
    } else {
        for f in &findings {
            println!("{f}");
        }
        Err(CmdError::Domain(format!(
            "{} structural finding(s)",
            findings.len()
        )))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_solve(
    network: &Path,
    dispatch: Option<&Path>,
    method: Method,
    seed: u64,
    index: u64,
    options: SolveOptions,
    out: &Path,
    quiet: bool,
) -> CmdResult {
    require_file(network)?;
    if let Some(d) = dispatch {
        require_file(d)?;
    }
    let net = NetworkModel::load(network)?;
    let dispatch = match dispatch {
        Some(path) => Dispatch::load(path, &net)?,
        None => {
            let mut rng = stream(seed, index, Purpose::Dispatch);
            generate_dispatch(&net, &Default::default(), &mut rng)?
        }
    };
    let solution = match method {
        Method::Exact => solve_exact(&net, &dispatch, &options)?,
        Method::Linear => solve_linear(&net, &dispatch),
    };
    solution.save(&net, out)?;
    if !quiet {
        eprintln!(
            "solved {:?} in {} iterations, wrote {}",
            method,
            solution.iterations,
            out.display()
        );
    }
    Ok(())
}

struct EstimateArgs<'a> {
    network: &'a Path,
    truth: &'a Path,
    ev: f64,
    ei: f64,
    distribution: Distribution,
    preference: Preference,
    fractions: Option<(f64, f64)>,
    seed: u64,
    index: u64,
    max_resamples: u32,
    postfilter: bool,
    threshold: f64,
    normalization: Normalization,
    out: &'a Path,
    quiet: bool,
}

/// Everything a single estimation run produces, in one re-ingestable file.
#[derive(Serialize)]
struct EstimateOutputDoc {
    metadata: EstimateMetadata,
    run_errors: dsse::harness::RunErrors,
    estimate: dsse::estimator::EstimateDoc,
}

#[derive(Serialize)]
struct EstimateMetadata {
    preference: Preference,
    node_fraction: f64,
    flow_fraction: f64,
    e_v: f64,
    e_i: f64,
    distribution: Distribution,
    seed: u64,
    index: u64,
    postfilter: bool,
    normalization: Normalization,
    resamples_used: u32,
}

fn cmd_estimate(args: EstimateArgs) -> CmdResult {
    require_file(args.network)?;
    require_file(args.truth)?;
    let net = NetworkModel::load(args.network)?;
    let truth = dsse::powerflow::PowerFlowSolution::load(args.truth, &net)?;

    let noise = NoiseConfig {
        e_v: args.ev,
        e_i: args.ei,
        distribution: args.distribution,
        ..NoiseConfig::default()
    };
    let mut rng = stream(args.seed, args.index, Purpose::Noise);
    let pool = synthesize_pool(&truth, &net, &noise, &mut rng)?;
    let opts = SelectOptions {
        preference: args.preference,
        fractions: args.fractions,
        max_resamples: args.max_resamples,
        include_antisym: false,
    };
    let set = select_set(&pool, &net, &opts, args.seed, args.index)?;
    let (node_fraction, flow_fraction) = opts.fractions();
    let resamples_used = set.resamples_used;

    let system = assemble(&net, &set)?;
    let mut estimate = solve_wls(&system)?;
    if args.postfilter {
        estimate = postfilter_antisymmetry(&estimate, &net, args.threshold);
    }
    let run_errors = evaluate_errors(&truth, &estimate.state, args.normalization, resamples_used);

    let doc = EstimateOutputDoc {
        metadata: EstimateMetadata {
            preference: args.preference,
            node_fraction,
            flow_fraction,
            e_v: args.ev,
            e_i: args.ei,
            distribution: args.distribution,
            seed: args.seed,
            index: args.index,
            postfilter: args.postfilter,
            normalization: args.normalization,
            resamples_used,
        },
        run_errors,
        estimate: estimate.to_doc(&net),
    };
    let text = serde_json::to_string_pretty(&doc).expect("schema serializes");
    write_atomic(args.out, text.as_bytes())?;
    if !args.quiet {
        eprintln!(
            "estimated {} states (rank {}), mean voltage error {:.3e}, wrote {}",
            net.state_dim(),
            estimate.rank,
            run_errors.mean_err_v,
            args.out.display()
        );
    }
    Ok(())
}

fn cmd_grid(
    network: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    dispatches: Option<u32>,
    postfilter: bool,
    out_dir: &Path,
    quiet: bool,
) -> CmdResult {
    require_file(network)?;
    if let Some(c) = config {
        require_file(c)?;
    }
    let net = NetworkModel::load(network)?;
    let mut cfg = match config {
        Some(path) => GridConfig::load(path)?,
        None => GridConfig::default(),
    };
    // Flags win over the config file, which wins over defaults.
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(d) = dispatches {
        cfg.dispatch_count = d;
    }
    if postfilter {
        cfg.postfilter = true;
    }

    let summary = run_grid(&net, &cfg, out_dir)?;
    if !quiet {
        for cell in &summary.cells {
            match (&cell.stats, &cell.error) {
                (Some(s), _) => eprintln!(
                    "cell {:>2} {:?} e_v={} e_i={}: avg_mean_v={:.4}% avg_max_f={:.3}%",
                    cell.scenario_index,
                    cell.preference,
                    cell.e_v,
                    cell.e_i,
                    s.avg_of_mean_v * 100.0,
                    s.avg_of_max_f * 100.0
                ),
                (None, Some(e)) => eprintln!(
                    "cell {:>2} {:?} e_v={} e_i={}: FAILED: {e}",
                    cell.scenario_index, cell.preference, cell.e_v, cell.e_i
                ),
                (None, None) => unreachable!("cell has stats or error"),
            }
        }
        eprintln!(
            "wrote {} files to {}",
            summary.files.len(),
            out_dir.display()
        );
    }
    if summary.failed_cells() > 0 {
        // Partial grid is on disk; the sidecar carries the failure manifest.
        return Err(CmdError::Domain(format!(
            "{} of {} grid cells failed; partial tables written to {}",
            summary.failed_cells(),
            summary.cells.len(),
            out_dir.display()
        )));
    }
    Ok(())
}
