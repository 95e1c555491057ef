use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use labelshift::calibrate::{Population, ScoreSet};
use labelshift::data::Method;
use labelshift::coherence::stable_propensity;
use labelshift::datagen::{enumerate_joint, implied_moments, toy_config, MomentTargets, DESIGN_TARGETS};
use labelshift::estimators::{em_label_shift, grid_mle, EmSettings};
use labelshift::harness::sweep::WORKERS_ENV;
use labelshift::harness::{
    load_csv, load_dataset_csv, run_phi_grid, run_pipeline, write_dataset_csv, write_manifest, write_results,
    BootstrapScope, CoherenceRow, CoherenceSummaryRow, ConfigFamily, ErrorRow, EstimateRow, GridResults, GridSpec,
    ModelKind, PipelineOptions, SummaryRow,
};

#[derive(Parser)]
#[command(name = "labelshift", version, about = "Missing-outcome prevalence estimation via label shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep the missingness mechanism over a phi grid on simulated data.
    Simulate(SimulateArgs),
    /// Apply the simulation missingness mechanism to a fully observed CSV.
    Induce(InduceArgs),
    /// Run the estimation pipeline on a CSV dataset.
    Estimate(EstimateArgs),
    /// Exact reference computations.
    #[command(subcommand)]
    Oracle(OracleCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Toy,
    Highdim,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    NaiveBayes,
    Logistic,
}

#[derive(Clone, Copy, ValueEnum)]
enum PopulationArg {
    ValidationObserved,
    ValidationMissing,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Inputs,
    Recalibrate,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, value_enum, default_value = "logistic")]
    model_kind: ModelArg,
    /// Skip the Platt-calibrated estimators.
    #[arg(long)]
    no_calibrate: bool,
    /// Truncate IPW weights at this empirical quantile.
    #[arg(long)]
    ipw_clip_quantile: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    bootstrap_b: usize,
    #[arg(long, default_value_t = 0.5)]
    split_fraction: f64,
    #[arg(long, value_enum, default_value = "all")]
    coherence_population: PopulationArg,
    #[arg(long, value_enum, default_value = "recalibrate")]
    bootstrap_scope: ScopeArg,
    /// Laplace smoothing for naive Bayes.
    #[arg(long)]
    nb_alpha: Option<f64>,
    #[arg(long)]
    cv_folds: Option<usize>,
    /// Comma-separated ridge penalties searched by cross-validation.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    em_tol: Option<f64>,
    #[arg(long)]
    em_max_iter: Option<usize>,
}

impl PipelineArgs {
    fn options(&self, seed: u64) -> PipelineOptions {
        let d = PipelineOptions::default();
        PipelineOptions {
            model_kind: match self.model_kind {
                ModelArg::NaiveBayes => ModelKind::NaiveBayes,
                ModelArg::Logistic => ModelKind::Logistic,
            },
            calibrate: !self.no_calibrate,
            ipw_clip_quantile: self.ipw_clip_quantile,
            bootstrap_b: self.bootstrap_b,
            split_fraction: self.split_fraction,
            seed,
            coherence_population: match self.coherence_population {
                PopulationArg::ValidationObserved => Population::ValidationObserved,
                PopulationArg::ValidationMissing => Population::ValidationMissing,
                PopulationArg::All => Population::All,
            },
            bootstrap_scope: match self.bootstrap_scope {
                ScopeArg::Inputs => BootstrapScope::Inputs,
                ScopeArg::Recalibrate => BootstrapScope::Recalibrate,
            },
            nb_alpha: self.nb_alpha.unwrap_or(d.nb_alpha),
            cv_folds: self.cv_folds.unwrap_or(d.cv_folds),
            lambda_grid: self.lambda_grid.clone().unwrap_or(d.lambda_grid),
            em: EmSettings {
                tol: self.em_tol.unwrap_or(d.em.tol),
                max_iter: self.em_max_iter.unwrap_or(d.em.max_iter),
                ..d.em
            },
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "toy")]
    family: Family,
    /// Comma-separated mechanism weights in [0, 1].
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 0.5, 0.75, 1.0])]
    phi: Vec<f64>,
    /// Base seed; replications use consecutive seeds from here.
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    replications: u64,
    /// Units per dataset; the family's default size when omitted.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct TargetArgs {
    /// Observed-case outcome mean to hit.
    #[arg(long, default_value_t = DESIGN_TARGETS.mu0_target)]
    mu0_target: f64,
    /// Missing-case outcome mean to hit.
    #[arg(long, default_value_t = DESIGN_TARGETS.mu1_target)]
    mu1_target: f64,
}

impl TargetArgs {
    fn targets(&self) -> MomentTargets {
        MomentTargets { mu0_target: self.mu0_target, mu1_target: self.mu1_target }
    }
}

#[derive(Args)]
struct InduceArgs {
    /// Fully observed CSV (`m` all zero).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    phi: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
    /// Append the true outcome of every unit as `y_oracle`.
    #[arg(long)]
    with_oracle: bool,
    /// Also run the pipeline on the induced data, writing results here.
    #[arg(long)]
    estimate_into: Option<PathBuf>,
    #[command(flatten)]
    targets: TargetArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Compare EM with the grid-search maximum likelihood on a score file.
    Grid {
        /// One probability per line.
        #[arg(long)]
        scores: PathBuf,
        /// Outcome prevalence of the population the scores were trained on.
        #[arg(long)]
        source_prevalence: f64,
        #[arg(long, default_value_t = 1e-6)]
        resolution: f64,
    },
    /// Enumerate the toy joint law and compare the two propensity forms.
    Joint {
        #[arg(long, default_value_t = 1.0)]
        phi: f64,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Simulate(args) => simulate(args),
        Command::Induce(args) => induce(args),
        Command::Estimate(args) => estimate(args),
        Command::Oracle(OracleCommand::Grid { scores, source_prevalence, resolution }) => {
            oracle_grid(&scores, source_prevalence, resolution)
        }
        Command::Oracle(OracleCommand::Joint { phi }) => oracle_joint(phi),
    }
}

fn write_grid(results: &GridResults, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_results(&results.estimate_rows(), EstimateRow::HEADER, out.join("estimates.csv"))?;
    write_results(&results.coherence_rows(), CoherenceRow::HEADER, out.join("coherence.csv"))?;
    write_results(&results.summary_rows(), SummaryRow::HEADER, out.join("summary.csv"))?;
    write_results(&results.coherence_summary_rows(), CoherenceSummaryRow::HEADER, out.join("coherence_summary.csv"))?;
    write_results(&results.error_rows(), ErrorRow::HEADER, out.join("errors.csv"))?;
    write_manifest(&results.manifest(), out.join("manifest.json"))?;
    Ok(())
}

fn print_summary(results: &GridResults) {
    for row in results.summary_rows() {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "phi={:<5} {:<8} mean={} mae={} coverage={} failed={}",
            row.phi,
            row.method,
            fmt(row.mean_point),
            fmt(row.mean_abs_error),
            fmt(row.coverage),
            row.n_failed
        );
    }
    for row in results.coherence_summary_rows() {
        let delta = row.mean_delta.map_or("-".to_string(), |v| format!("{v:.6}"));
        let kind = if row.calibrated { "calibrated" } else { "uncalibrated" };
        println!("phi={:<5} coherence {kind} delta={delta}", row.phi);
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    if args.replications == 0 {
        bail!("--replications must be at least 1");
    }
    let (family, default_n) = match args.family {
        Family::Toy => (ConfigFamily::Toy, 1_000),
        Family::Highdim => (ConfigFamily::Highdim, 10_000),
    };
    let spec = GridSpec {
        family,
        phi_grid: args.phi,
        seeds: (0..args.replications).map(|i| args.seed.wrapping_add(i)).collect(),
        n: args.n.unwrap_or(default_n),
        options: args.pipeline.options(args.seed),
        workers: args.workers,
    };
    let results = run_phi_grid(&spec)?;
    write_grid(&results, &args.out)?;
    print_summary(&results);
    Ok(())
}

fn induce(args: InduceArgs) -> Result<()> {
    let complete = load_csv(&args.input).with_context(|| format!("loading {}", args.input.display()))?;
    let targets = args.targets.targets();
    let induced = labelshift::datagen::induce_missingness(&complete, args.phi, targets, args.seed)?;
    let oracle = args.with_oracle.then_some(&induced.generated.oracle);
    write_dataset_csv(&induced.generated.dataset, oracle, &args.output)?;
    println!(
        "beta0={:.6} beta={:.6} p_m={:.4} mu0={:.4} mu1={:.4} missing={}/{}",
        induced.beta0,
        induced.beta,
        induced.implied.p_m,
        induced.implied.mu0,
        induced.implied.mu1,
        induced.generated.dataset.n_missing(),
        induced.generated.dataset.len()
    );
    if let Some(out) = args.estimate_into {
        let spec = GridSpec {
            family: ConfigFamily::CsvInduced { complete, targets },
            phi_grid: vec![args.phi],
            seeds: vec![args.seed],
            n: 0,
            options: args.pipeline.options(args.seed),
            workers: None,
        };
        let results = run_phi_grid(&spec)?;
        write_grid(&results, &out)?;
        print_summary(&results);
    }
    Ok(())
}

/// Results rows of a single run; `phi` stays empty since the mechanism is unknown.
#[derive(Serialize)]
struct RunRow {
    phi: Option<f64>,
    seed: u64,
    method: Method,
    point: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    abs_error: Option<f64>,
    calibrated: bool,
}

#[derive(Serialize)]
struct RunCoherenceRow {
    phi: Option<f64>,
    seed: u64,
    delta: Option<f64>,
    calibrated: bool,
    population: Population,
}

fn estimate(args: EstimateArgs) -> Result<()> {
    let loaded = load_dataset_csv(&args.input).with_context(|| format!("loading {}", args.input.display()))?;
    let options = args.pipeline.options(args.seed);
    let result = run_pipeline(&loaded.dataset, &options)?;
    let oracle = loaded.oracle.as_ref().and_then(|o| o.missing_mean(&loaded.dataset));
    let rows: Vec<RunRow> = result
        .estimates
        .iter()
        .map(|e| RunRow {
            phi: None,
            seed: args.seed,
            method: e.method,
            point: Some(e.point),
            ci_low: Some(e.ci_low),
            ci_high: Some(e.ci_high),
            abs_error: oracle.map(|o| (e.point - o).abs()),
            calibrated: e.method.is_calibrated(),
        })
        .collect();
    let coherence: Vec<RunCoherenceRow> = std::iter::once((&result.coherence_uncalibrated, false))
        .chain(result.coherence_calibrated.as_ref().map(|c| (c, true)))
        .map(|(c, calibrated)| RunCoherenceRow {
            phi: None,
            seed: args.seed,
            delta: Some(c.delta),
            calibrated,
            population: c.population,
        })
        .collect();
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_results(&rows, EstimateRow::HEADER, args.out.join("estimates.csv"))?;
    write_results(&coherence, CoherenceRow::HEADER, args.out.join("coherence.csv"))?;
    write_manifest(&result.manifest, args.out.join("manifest.json"))?;
    for e in &result.estimates {
        println!("{:<8} {:.4} [{:.4}, {:.4}]", e.method, e.point, e.ci_low, e.ci_high);
    }
    for c in &coherence {
        let kind = if c.calibrated { "calibrated" } else { "uncalibrated" };
        println!("coherence {kind} delta={:.6}", c.delta.unwrap_or(f64::NAN));
    }
    if let Some(o) = oracle {
        println!("oracle missing-case prevalence {o:.4}");
    }
    Ok(())
}

fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.trim().parse::<f64>().with_context(|| format!("line {}: `{l}` is not a number", i + 1)))
        .collect()
}

fn oracle_grid(path: &Path, source_prevalence: f64, resolution: f64) -> Result<()> {
    let scores = ScoreSet::new(read_scores(path)?, true, Population::ValidationMissing)?;
    let em = em_label_shift(&scores, source_prevalence, &EmSettings::default())?;
    let grid = grid_mle(&scores, source_prevalence, resolution)?;
    println!("em={:.8} iterations={} converged={}", em.pi_hat, em.iterations, em.converged);
    println!("grid={grid:.8} resolution={resolution:e}");
    println!("gap={:.3e}", (em.pi_hat - grid).abs());
    Ok(())
}

fn oracle_joint(phi: f64) -> Result<()> {
    let config = toy_config(phi)?;
    let moments = implied_moments(&config)?;
    let cells = enumerate_joint(&config)?;
    println!("beta0={:.6} beta={:.6}", config.beta0, config.beta);
    println!("p_m={:.8} mu0={:.8} mu1={:.8}", moments.p_m, moments.mu0, moments.mu1);
    println!("x y m prob");
    for c in &cells {
        println!("{} {} {} {:.10}", c.x[0], c.y, c.m, c.prob);
    }
    let mut worst: f64 = 0.0;
    for x in [0u8, 1] {
        let at = |y: u8, m: u8| -> f64 { cells.iter().filter(|c| c.x[0] == x && c.y == y && c.m == m).map(|c| c.prob).sum() };
        let direct = (at(0, 1) + at(1, 1)) / (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
        let stable = stable_propensity(at(1, 0) / (at(0, 0) + at(1, 0)), moments.mu0, moments.mu1, moments.p_m);
        println!("x={x} direct={direct:.10} stable={stable:.10}");
        worst = worst.max((direct - stable).abs());
    }
    println!("max_gap={worst:.3e}");
    Ok(())
}
