//! Command-line driver.
//!
//! Three subcommands:
//! - `run`: closed-loop episodes of the configured scenario at one lambda;
//!   writes `paths.csv`, `llr.csv`, `summary.csv`.
//! - `sweep-lambda`: the same scenario across several lambda values
//!   (optionally the raw reference policy), one artifact directory per
//!   value plus a combined `summary.csv`; checks that safety rates order
//!   by lambda.
//! - `compare-oracle`: empirical selection frequencies on a finite
//!   instance against its exactly computed optimal policy, per rollout
//!   budget; writes `tv.csv`.
//!
//! Exit codes: 0 success, 1 flag/config errors, 2 runtime errors.
//! `--threads` changes wall-clock only; artifacts are byte-identical for a
//! given (config, seed).

use clap::{Args, Parser, Subcommand};
use dpic_core::metrics::{
    episode_llr, format_float, pr_safe, write_llr_csv, write_summary_csv, LLRSeries, SummaryRow,
};
use dpic_core::model::Trajectory;
use dpic_core::oracle::{embed, enumerate_dp, FiniteKLProblem};
use dpic_core::sampler::{reference_episode, run_episode, EpisodeRecord, EpisodeSeed, SeedLineage};
use dpic_core::scenarios::{
    fire_cost, load_config, reference_policy, unicycle_dynamics, RunConfig,
};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "dpic",
    about = "Sampling-based synthesis of KL-constrained control policies",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run closed-loop episodes and write path, LLR, and summary CSVs.
    Run(RunArgs),
    /// Run the scenario once per lambda and compare safety rates.
    SweepLambda(SweepArgs),
    /// Compare empirical selection frequencies against the exact optimal
    /// policy on a finite instance.
    CompareOracle(CompareArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config; omitted fields take built-in defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Config as a positional path (alternative to --config).
    #[arg(value_name = "CONFIG", conflicts_with = "config")]
    config_pos: Option<PathBuf>,
    /// Rollouts per replanning step.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads (0 = all cores). Wall-clock only; never results.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Lambda values, comma separated (e.g. 3,2,0.5).
    #[arg(long, value_delimiter = ',', required = true)]
    lambdas: Vec<f64>,
    /// Also run the raw reference policy (reported as lambda = inf).
    #[arg(long)]
    include_reference: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Finite instance fixture (TOML).
    #[arg(long, value_name = "FILE")]
    instance: PathBuf,
    /// Rollout budgets to test, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "100,1000,10000")]
    samples: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_name = "DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (0 = all cores). Wall-clock only; never results.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

/// Anything that should terminate the process with a specific exit code.
#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::SweepLambda(args) => cmd_sweep_lambda(args),
        Command::CompareOracle(args) => cmd_compare_oracle(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}

fn init_threads(threads: usize) -> Result<(), Failure> {
    if threads == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(config_err)
}

/// Loads the config (or defaults), applies flag overrides, validates.
fn assemble_config(
    common: &ConfigArgs,
    lambda: Option<f64>,
) -> Result<RunConfig, Failure> {
    let path = common.config.as_ref().or(common.config_pos.as_ref());
    let mut config = match path {
        Some(p) => load_config(p).map_err(config_err)?,
        None => RunConfig::default(),
    };
    if let Some(v) = lambda {
        config.run.lambda = v;
    }
    if let Some(v) = common.samples {
        config.run.samples = v;
    }
    if let Some(v) = common.episodes {
        config.run.episodes = v;
    }
    if let Some(v) = common.seed {
        config.run.seed = v;
    }
    if let Some(v) = &common.out_dir {
        config.run.out_dir = v.clone();
    }
    config.validate().map_err(config_err)?;
    Ok(config)
}

struct EpisodeSet {
    paths: Vec<Trajectory>,
    /// One record per episode; empty for reference-policy runs.
    records: Vec<EpisodeRecord>,
}

/// All episodes of one (scenario, lambda, seed) cell, in episode order.
fn run_episode_set(config: &RunConfig, lambda: Option<f64>) -> Result<EpisodeSet, Failure> {
    let scenario = &config.scenario;
    let dynamics = unicycle_dynamics(scenario);
    let policy = reference_policy(scenario).map_err(config_err)?;
    let costs = fire_cost(scenario);
    let x0 = scenario.initial_state();
    let lineage = SeedLineage::new(config.run.seed);
    match lambda {
        Some(lambda) => {
            let results: Result<Vec<_>, _> = (0..config.run.episodes as u64)
                .into_par_iter()
                .map(|e| {
                    run_episode(
                        &dynamics,
                        &policy,
                        &costs,
                        &x0,
                        config.run.samples,
                        lambda,
                        EpisodeSeed::new(lineage, e),
                    )
                })
                .collect();
            let results = results.map_err(runtime_err)?;
            let (paths, records) = results.into_iter().unzip();
            Ok(EpisodeSet { paths, records })
        }
        None => {
            let paths: Vec<Trajectory> = (0..config.run.episodes as u64)
                .into_par_iter()
                .map(|e| {
                    reference_episode(&dynamics, &policy, &costs, &x0, EpisodeSeed::new(lineage, e))
                })
                .collect();
            Ok(EpisodeSet {
                paths,
                records: Vec::new(),
            })
        }
    }
}

/// `paths.csv`: one row per (episode, t); the terminal row has empty
/// control columns.
fn write_paths_csv(path: &Path, paths: &[Trajectory]) -> Result<(), Failure> {
    let file = fs::File::create(path).map_err(runtime_err)?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(w, "episode,t,px,py,s,theta,a,omega")?;
        for (e, traj) in paths.iter().enumerate() {
            for (t, state) in traj.states().iter().enumerate() {
                let mut line = String::new();
                let _ = write!(
                    line,
                    "{e},{t},{},{},{},{}",
                    format_float(state[0]),
                    format_float(state[1]),
                    format_float(state[2]),
                    format_float(state[3])
                );
                if let Some(u) = traj.controls().get(t) {
                    let _ = write!(line, ",{},{}", format_float(u[0]), format_float(u[1]));
                } else {
                    line.push_str(",,");
                }
                writeln!(w, "{line}")?;
            }
        }
        w.flush()
    })()
    .map_err(runtime_err)
}

/// LLR traces for a run; reference-policy runs carry identically zero
/// traces (no selection ever happens).
fn llr_series(set: &EpisodeSet, horizon: usize) -> Result<LLRSeries, Failure> {
    let per_episode: Vec<Vec<f64>> = if set.records.is_empty() {
        set.paths.iter().map(|_| vec![0.0; horizon + 1]).collect()
    } else {
        set.records.iter().map(episode_llr).collect()
    };
    LLRSeries::aggregate(per_episode).map_err(runtime_err)
}

struct CellOutcome {
    lambda: f64,
    pr_safe: f64,
    mean_final_llr: f64,
    std_final_llr: f64,
}

/// Runs one cell and writes its artifact directory.
fn run_cell(
    config: &RunConfig,
    lambda: Option<f64>,
    dir: &Path,
) -> Result<CellOutcome, Failure> {
    let set = run_episode_set(config, lambda)?;
    let series = llr_series(&set, config.scenario.horizon)?;
    let scenario = &config.scenario;
    let safe = pr_safe(&set.paths, |x| scenario.in_fire(x));
    fs::create_dir_all(dir).map_err(runtime_err)?;
    write_paths_csv(&dir.join("paths.csv"), &set.paths)?;
    let llr_file = fs::File::create(dir.join("llr.csv")).map_err(runtime_err)?;
    write_llr_csv(BufWriter::new(llr_file), &series).map_err(runtime_err)?;
    let outcome = CellOutcome {
        lambda: lambda.unwrap_or(f64::INFINITY),
        pr_safe: safe,
        mean_final_llr: series.final_mean(),
        std_final_llr: series.final_std(),
    };
    let summary_file = fs::File::create(dir.join("summary.csv")).map_err(runtime_err)?;
    write_summary_csv(BufWriter::new(summary_file), &[summary_row(config, &outcome)])
        .map_err(runtime_err)?;
    Ok(outcome)
}

fn summary_row(config: &RunConfig, outcome: &CellOutcome) -> SummaryRow {
    SummaryRow {
        lambda: outcome.lambda,
        samples: config.run.samples,
        pr_safe: outcome.pr_safe,
        mean_final_llr: outcome.mean_final_llr,
        std_final_llr: outcome.std_final_llr,
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    init_threads(args.common.threads)?;
    let config = assemble_config(&args.common, args.lambda)?;
    let started = Instant::now();
    let outcome = run_cell(&config, Some(config.run.lambda), &config.run.out_dir)?;
    println!(
        "lambda={} n={} episodes={} seed={} pr_safe={:.4} mean_final_llr={:.4} std_final_llr={:.4} elapsed={:.1}s",
        outcome.lambda,
        config.run.samples,
        config.run.episodes,
        config.run.seed,
        outcome.pr_safe,
        outcome.mean_final_llr,
        outcome.std_final_llr,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Directory name for one sweep cell; lambda values print in shortest
/// round-trip form so names stay stable.
fn cell_dir_name(lambda: Option<f64>) -> String {
    match lambda {
        Some(l) => format!("lambda_{l}"),
        None => "reference".to_string(),
    }
}

fn cmd_sweep_lambda(args: SweepArgs) -> Result<(), Failure> {
    init_threads(args.common.threads)?;
    let config = assemble_config(&args.common, None)?;
    if args.lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Failure::Config("every lambda must be positive".into()));
    }
    let started = Instant::now();
    let mut cells: Vec<Option<f64>> = Vec::new();
    if args.include_reference {
        cells.push(None);
    }
    cells.extend(args.lambdas.iter().copied().map(Some));

    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    for &lambda in &cells {
        let dir = config.run.out_dir.join(cell_dir_name(lambda));
        let outcome = run_cell(&config, lambda, &dir)?;
        println!(
            "{:<12} pr_safe={:.4} mean_final_llr={:.4} ({:.1}s)",
            cell_dir_name(lambda),
            outcome.pr_safe,
            outcome.mean_final_llr,
            started.elapsed().as_secs_f64()
        );
        rows.push(summary_row(&config, &outcome));
        outcomes.push(outcome);
    }
    fs::create_dir_all(&config.run.out_dir).map_err(runtime_err)?;
    let combined = fs::File::create(config.run.out_dir.join("summary.csv")).map_err(runtime_err)?;
    write_summary_csv(BufWriter::new(combined), &rows).map_err(runtime_err)?;

    // safety should rise as the divergence price drops; check over the
    // requested lambdas (the reference row is reported, not asserted:
    // a huge lambda is statistically indistinguishable from it)
    let mut tilted: Vec<&CellOutcome> = outcomes.iter().filter(|o| o.lambda.is_finite()).collect();
    tilted.sort_by(|a, b| b.lambda.total_cmp(&a.lambda));
    let ordered = tilted.windows(2).all(|w| w[0].pr_safe < w[1].pr_safe);
    let chain = tilted
        .iter()
        .map(|o| format!("pr_safe(lambda={})={:.4}", o.lambda, o.pr_safe))
        .collect::<Vec<_>>()
        .join(" < ");
    if ordered {
        println!("ordering OK: {chain}");
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "safety rates out of order: {chain}"
        )))
    }
}

fn cmd_compare_oracle(args: CompareArgs) -> Result<(), Failure> {
    init_threads(args.threads)?;
    if args.episodes == 0 || args.samples.is_empty() {
        return Err(Failure::Config(
            "need at least one episode and one sample budget".into(),
        ));
    }
    let prob = FiniteKLProblem::load(&args.instance).map_err(config_err)?;
    let solution = enumerate_dp(&prob).map_err(config_err)?;
    let (dynamics, reference, costs) = embed(&prob).map_err(config_err)?;
    let x0 = dpic_core::model::StateVector::from([prob.initial_state as f64]);
    let lineage = SeedLineage::new(args.seed);

    fs::create_dir_all(&args.out_dir).map_err(runtime_err)?;
    let file = fs::File::create(args.out_dir.join("tv.csv")).map_err(runtime_err)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "n,t,x,visits,tv").map_err(runtime_err)?;

    for &n in &args.samples {
        // counts[t][x][u] over all episodes at this budget
        let counts: Vec<Vec<Vec<u64>>> = (0..args.episodes as u64)
            .into_par_iter()
            .map(|e| {
                let mut local =
                    vec![vec![vec![0u64; prob.n_actions]; prob.n_states]; prob.horizon];
                // the seed lineage is keyed by budget as well so different
                // budgets draw independent streams
                let seed = EpisodeSeed::new(lineage, e ^ ((n as u64) << 32));
                let (_, record) =
                    run_episode(&dynamics, &reference, &costs, &x0, n, prob.lambda, seed)?;
                for step in &record.steps {
                    let x = step.state[0] as usize;
                    let u = step.control[0] as usize;
                    local[step.t][x][u] += 1;
                }
                Ok::<_, dpic_core::sampler::SamplerError>(local)
            })
            .try_reduce(
                || vec![vec![vec![0u64; prob.n_actions]; prob.n_states]; prob.horizon],
                |mut acc, local| {
                    for (a, l) in acc.iter_mut().flatten().flatten().zip(
                        local.iter().flatten().flatten(),
                    ) {
                        *a += l;
                    }
                    Ok(acc)
                },
            )
            .map_err(runtime_err)?;

        let mut weighted_tv = 0.0;
        let mut total_visits = 0u64;
        for t in 0..prob.horizon {
            for x in 0..prob.n_states {
                let visits: u64 = counts[t][x].iter().sum();
                if visits == 0 {
                    continue;
                }
                let tv: f64 = 0.5
                    * counts[t][x]
                        .iter()
                        .enumerate()
                        .map(|(u, &c)| {
                            (c as f64 / visits as f64 - solution.policy[t][x][u]).abs()
                        })
                        .sum::<f64>();
                writeln!(w, "{n},{t},{x},{visits},{}", format_float(tv)).map_err(runtime_err)?;
                weighted_tv += tv * visits as f64;
                total_visits += visits;
            }
        }
        println!(
            "n={n}: visitation-weighted mean TV {:.5} over {total_visits} selections",
            weighted_tv / total_visits as f64
        );
    }
    w.flush().map_err(runtime_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_dir_names_are_stable() {
        assert_eq!(cell_dir_name(Some(3.0)), "lambda_3");
        assert_eq!(cell_dir_name(Some(0.5)), "lambda_0.5");
        assert_eq!(cell_dir_name(Some(1e6)), "lambda_1000000");
        assert_eq!(cell_dir_name(None), "reference");
    }

    #[test]
    fn paths_csv_single_state_path() {
        // a horizon-0 trajectory is a single state and yields one row with
        // empty control columns
        use dpic_core::model::{
            ControlVector, CostModel, DeterministicDynamics, StateVector, Trajectory,
        };
        struct Still;
        impl DeterministicDynamics for Still {
            fn horizon(&self) -> usize {
                0
            }
            fn state_dim(&self) -> usize {
                4
            }
            fn control_dim(&self) -> usize {
                2
            }
            fn step(&self, _t: usize, x: &StateVector, _u: &ControlVector) -> StateVector {
                x.clone()
            }
        }
        struct Free;
        impl CostModel for Free {
            fn stage(&self, _t: usize, _x: &StateVector, _u: &ControlVector) -> f64 {
                0.0
            }
            fn terminal(&self, _x: &StateVector) -> f64 {
                0.0
            }
        }
        let traj = Trajectory::from_parts(
            &Still,
            &Free,
            0,
            vec![StateVector::from([1.0, 2.0, 3.0, 4.0])],
            vec![],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("paths.csv");
        write_paths_csv(&csv, &[traj]).unwrap();
        let text = fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2, "header plus exactly one row");
        assert!(lines[1].starts_with("0,0,"));
        assert!(lines[1].ends_with(",,"), "terminal row has empty controls");
    }
}
