mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use npgap::amortization::{RegressionGapConfig, MIN_CORRELATION_DRAWS, MIN_SCALAR_DRAWS};
use npgap::experiments::{
    alignment_experiment, contamination_experiment, AlignmentConfig, ContaminationConfig,
    EncoderMode,
};
use npgap::lnp_analytic::{AggregationMode, BoundConstants};
use npgap::nn::{train, LnpModel, TrainConfig};
use npgap::report::{self, ExperimentReport, Manifest, ManifestEntry};
use npgap::{KernelSpec, NoiseModel};

#[derive(Parser, Debug)]
#[command(name = "npgap", version, about = "Gap experiments between exact GPs and latent neural processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Master seed; required by Monte Carlo commands.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// CSV output path (a directory for `suite`). CSV goes to stdout if absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Also write a JSON manifest here.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, value_parser = positive)]
    threads: Option<usize>,

    /// Divide Monte Carlo draw counts by 10.
    #[arg(long, global = true)]
    fast: bool,

    /// key=value file of flag defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scalar amortization gap: closed form against Monte Carlo.
    ScalarGap(ScalarGapArgs),
    /// Variance of v̂ and its correlation with ē.
    Correlation(CorrelationArgs),
    /// d = 1 contexts sharing a mean representation.
    Pathology(PathologyArgs),
    /// Mean against second-order aggregation over n.
    AggCompare(AggCompareArgs),
    /// Gap against representation dimension.
    DimScan(DimScanArgs),
    /// Computable terms of the KL bounds.
    Bounds(BoundsArgs),
    /// Label contamination of a trained LNP.
    Contamination(ContaminationArgs),
    /// Alignment of trained encoder features with Mercer eigenfunctions.
    Alignment(AlignmentArgs),
    /// Run the closed-form and Monte Carlo tables and bounds into --out.
    Suite,
}

#[derive(Args, Debug)]
struct ScalarGapArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [5, 10, 20, 50, 100, 500, 2000])]
    n: Vec<usize>,
    #[arg(long, default_value_t = 0.3)]
    lengthscale: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_d_sq: f64,
    #[arg(long, default_value_t = 100_000, value_parser = positive)]
    draws: usize,
}

#[derive(Args, Debug)]
struct CorrelationArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [10, 50, 100, 500, 1000])]
    n: Vec<usize>,
    #[arg(long, default_value_t = 50_000, value_parser = positive)]
    draws: usize,
}

#[derive(Args, Debug)]
struct PathologyArgs {
    #[arg(long, default_value_t = 0.3)]
    lengthscale: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_d_sq: f64,
}

#[derive(Args, Debug)]
struct AggCompareArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [10, 50, 100, 200, 500])]
    n: Vec<usize>,
    #[arg(long, default_value_t = 3, value_parser = positive)]
    d: usize,
    #[arg(long, default_value_t = 2000, value_parser = positive)]
    contexts: usize,
}

#[derive(Args, Debug)]
struct DimScanArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 5, 8])]
    d: Vec<usize>,
    #[arg(long, default_value_t = 50, value_parser = positive)]
    n: usize,
    #[arg(long, default_value_t = 0.3)]
    lengthscale: f64,
    #[arg(long, default_value_t = 2000, value_parser = positive)]
    contexts: usize,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [100, 10_000, 1_000_000])]
    n: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 0.3)]
    lengthscale: f64,
    #[arg(long, default_value_t = 0.05)]
    sigma_eps_sq: f64,
    #[arg(long, default_value_t = 0.5)]
    x_star: f64,
    #[arg(long, default_value_t = 1.0)]
    l_mu: f64,
    #[arg(long, default_value_t = 1.0)]
    l_sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    b_w: f64,
    #[arg(long, default_value_t = 1.0)]
    b_phi: f64,
    #[arg(long, default_value_t = 1.0)]
    b_psi: f64,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Trained model checkpoint.
    #[arg(long, required_unless_present = "train", conflicts_with = "train")]
    checkpoint: Option<PathBuf>,
    /// Train a model in-process instead.
    #[arg(long)]
    train: bool,
    #[arg(long, default_value_t = 4000, value_parser = positive)]
    steps: usize,
    /// Where to save an in-process model.
    #[arg(long, requires = "train")]
    save_checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    sigma_eps_sq: f64,
}

#[derive(Args, Debug)]
struct ContaminationArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0.2)]
    lengthscale: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [5, 10, 20, 50, 100, 200, 500, 1000])]
    n: Vec<usize>,
    #[arg(long, default_value_t = 400, value_parser = positive)]
    resamples: usize,
    #[arg(long, default_value_t = 30, value_parser = positive)]
    location_sets: usize,
    #[arg(long, default_value_t = 64, value_parser = positive)]
    z_samples: usize,
    #[arg(long, default_value_t = 0.5)]
    x_star: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    YZero,
    Marginal,
}

#[derive(Args, Debug)]
struct AlignmentArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0.5)]
    lengthscale: f64,
    #[arg(long, value_enum, default_value_t = Mode::YZero)]
    mode: Mode,
    #[arg(long, default_value_t = 200, value_parser = positive)]
    gp_samples: usize,
    #[arg(long, default_value_t = 2000, value_parser = positive)]
    grid: usize,
    #[arg(long, default_value_t = 16, value_parser = positive)]
    j: usize,
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

/// Errors the user can fix by changing the invocation.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(npgap::Error::Parameter(_)) = cause.downcast_ref::<npgap::Error>() {
            return 2;
        }
    }
    1
}

fn require_seed(cli: &Cli) -> Result<u64> {
    cli.seed
        .ok_or_else(|| Usage("this command draws random numbers; pass --seed".into()).into())
}

/// Fast-mode draw count, never below what the estimator accepts.
fn fast_draws(n: usize, fast: bool, min: usize) -> usize {
    if fast {
        scaled(n, true).max(min)
    } else {
        n
    }
}

fn scaled(n: usize, fast: bool) -> usize {
    if fast {
        (n / 10).max(1)
    } else {
        n
    }
}

/// Enough contexts for the largest second-order regression in the run.
fn regression_contexts(contexts: usize, fast: bool, d_max: usize) -> usize {
    let cfg = RegressionGapConfig::new(d_max, 1, AggregationMode::SecondOrder, 0, 0);
    fast_draws(contexts, fast, 10 * (cfg.feature_count() + 1))
}

fn obtain_model(m: &ModelArgs, lengthscale: f64, seed: u64, fast: bool) -> Result<(LnpModel, String)> {
    let noise = NoiseModel::positive(m.sigma_eps_sq)?;
    if let Some(path) = &m.checkpoint {
        let model = LnpModel::load(path)?;
        if let Some(meta) = &model.meta {
            if meta.lengthscale != lengthscale {
                eprintln!(
                    "warning: checkpoint was trained at lengthscale {} but --lengthscale is {lengthscale}",
                    meta.lengthscale
                );
            }
        }
        return Ok((model, path.display().to_string()));
    }
    let kernel = KernelSpec::squared_exponential(lengthscale, 1.0)?;
    let cfg = TrainConfig {
        steps: scaled(m.steps, fast),
        seed,
        ..TrainConfig::default()
    };
    let (model, _) = train(&cfg, &kernel, noise)?;
    let origin = match &m.save_checkpoint {
        Some(p) => {
            model.save(p)?;
            p.display().to_string()
        }
        None => "trained in-process".to_string(),
    };
    Ok((model, origin))
}

fn run(cli: &Cli, command: &Command) -> Result<ExperimentReport> {
    let fast = cli.fast;
    let start = Instant::now();
    let mut rep = match command {
        Command::ScalarGap(a) => {
            let seed = require_seed(cli)?;
            let draws = fast_draws(a.draws, fast, MIN_SCALAR_DRAWS);
            report::scalar_gap_report(&a.n, a.lengthscale, a.sigma_d_sq, draws, seed)?
        }
        Command::Correlation(a) => {
            let seed = require_seed(cli)?;
            report::correlation_report(&a.n, fast_draws(a.draws, fast, MIN_CORRELATION_DRAWS), seed)?
        }
        Command::Pathology(a) => report::pathology_report(a.lengthscale, a.sigma_d_sq, cli.seed.unwrap_or(0))?,
        Command::AggCompare(a) => {
            let seed = require_seed(cli)?;
            let contexts = regression_contexts(a.contexts, fast, a.d);
            report::agg_compare_report(&a.n, a.d, contexts, seed)?
        }
        Command::DimScan(a) => {
            let seed = require_seed(cli)?;
            let d_max = a.d.iter().copied().max().unwrap_or(1);
            let contexts = regression_contexts(a.contexts, fast, d_max);
            report::dim_scan_report(&a.d, a.n, a.lengthscale, contexts, seed)?
        }
        Command::Bounds(a) => {
            let c = BoundConstants::new(a.l_mu, a.l_sigma, a.b_w, a.b_phi, a.b_psi)?;
            let kernel = KernelSpec::squared_exponential(a.lengthscale, 1.0)?;
            let noise = NoiseModel::new(a.sigma_eps_sq)?;
            report::bounds_report(&c, &kernel, noise, a.d, &a.n, a.x_star, cli.seed.unwrap_or(0))?
        }
        Command::Contamination(a) => {
            let seed = require_seed(cli)?;
            let (model, origin) = obtain_model(&a.model, a.lengthscale, seed, fast)?;
            let kernel = KernelSpec::squared_exponential(a.lengthscale, 1.0)?;
            let noise = NoiseModel::positive(a.model.sigma_eps_sq)?;
            let mut results = Vec::with_capacity(a.n.len());
            for &n in &a.n {
                let cfg = ContaminationConfig {
                    resamples: scaled(a.resamples, fast).max(2),
                    location_sets: a.location_sets,
                    x_star: a.x_star,
                    z_samples: a.z_samples,
                    ..ContaminationConfig::new(n, seed)
                };
                results.push(contamination_experiment(&model, &kernel, noise, &cfg)?);
            }
            report::contamination_report(&results, seed)?
                .with_param("checkpoint", origin)
                .with_param("lengthscale", a.lengthscale)
                .with_param("sigma_eps_sq", a.model.sigma_eps_sq)
                .with_param("n", join(&a.n))
                .with_param("resamples", scaled(a.resamples, fast).max(2))
                .with_param("location_sets", a.location_sets)
                .with_param("z_samples", a.z_samples)
        }
        Command::Alignment(a) => {
            let seed = require_seed(cli)?;
            let (model, origin) = obtain_model(&a.model, a.lengthscale, seed, fast)?;
            let kernel = KernelSpec::squared_exponential(a.lengthscale, 1.0)?;
            let noise = NoiseModel::positive(a.model.sigma_eps_sq)?;
            let mode = match a.mode {
                Mode::YZero => EncoderMode::YZero,
                Mode::Marginal => EncoderMode::Marginal,
            };
            let cfg = AlignmentConfig {
                grid_n: a.grid,
                j: a.j,
                gp_samples: scaled(a.gp_samples, fast),
                ..AlignmentConfig::new(mode, seed)
            };
            let r = alignment_experiment(&model, &kernel, noise, &cfg)?;
            report::alignment_report(&r, seed)
                .with_param("checkpoint", origin)
                .with_param("grid", a.grid)
                .with_param("gp_samples", cfg.gp_samples)
        }
        Command::Suite => unreachable!("suite is dispatched separately"),
    };
    rep.wall_time_s = start.elapsed().as_secs_f64();
    if fast {
        rep = rep.with_param("fast", true);
    }
    Ok(rep)
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn print_summary(rep: &ExperimentReport) {
    for (k, v) in &rep.summary {
        eprintln!("{}: {k} = {v}", rep.command);
    }
}

fn run_single(cli: &Cli) -> Result<()> {
    let rep = run(cli, &cli.command)?;
    match &cli.out {
        Some(p) => output::save_csv(&rep, p)?,
        None => output::write_csv(&rep, std::io::stdout().lock())?,
    }
    print_summary(&rep);
    if let Some(m) = &cli.manifest {
        let mut manifest = Manifest::new(rep.seed, cli.fast);
        let out = cli.out.as_ref().map(|p| p.display().to_string());
        manifest.commands.push(ManifestEntry::ok(&rep, out));
        output::save_manifest(&manifest, m)?;
    }
    Ok(())
}

fn suite_commands() -> Vec<(&'static str, Command)> {
    vec![
        (
            "scalar-gap",
            Command::ScalarGap(ScalarGapArgs {
                n: vec![5, 10, 20, 50, 100, 500, 2000],
                lengthscale: 0.3,
                sigma_d_sq: 1.0,
                draws: 100_000,
            }),
        ),
        (
            "correlation",
            Command::Correlation(CorrelationArgs {
                n: vec![10, 50, 100, 500, 1000],
                draws: 50_000,
            }),
        ),
        (
            "pathology",
            Command::Pathology(PathologyArgs {
                lengthscale: 0.3,
                sigma_d_sq: 1.0,
            }),
        ),
        (
            "agg-compare",
            Command::AggCompare(AggCompareArgs {
                n: vec![10, 50, 100, 200, 500],
                d: 3,
                contexts: 2000,
            }),
        ),
        (
            "dim-scan",
            Command::DimScan(DimScanArgs {
                d: vec![1, 2, 3, 5, 8],
                n: 50,
                lengthscale: 0.3,
                contexts: 2000,
            }),
        ),
        (
            "bounds",
            Command::Bounds(BoundsArgs {
                n: vec![100, 10_000, 1_000_000],
                d: 3,
                lengthscale: 0.3,
                sigma_eps_sq: 0.05,
                x_star: 0.5,
                l_mu: 1.0,
                l_sigma: 1.0,
                b_w: 1.0,
                b_phi: 1.0,
                b_psi: 1.0,
            }),
        ),
    ]
}

fn run_suite(cli: &Cli) -> Result<bool> {
    let seed = require_seed(cli)?;
    let dir = cli
        .out
        .as_deref()
        .ok_or_else(|| Usage("suite writes several files; pass --out DIR".into()))?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = Manifest::new(seed, cli.fast);
    for (name, cmd) in suite_commands() {
        let start = Instant::now();
        let file = format!("{name}.csv");
        let entry = run(cli, &cmd).and_then(|rep| {
            output::save_csv(&rep, &dir.join(&file))?;
            print_summary(&rep);
            Ok(ManifestEntry::ok(&rep, Some(file)))
        });
        manifest.commands.push(entry.unwrap_or_else(|e| {
            eprintln!("{name} failed: {e:#}");
            ManifestEntry::failed(name, format!("{e:#}"), start.elapsed().as_secs_f64())
        }));
    }
    let path = cli.manifest.clone().unwrap_or_else(|| dir.join("manifest.json"));
    output::save_manifest(&manifest, &path)?;
    Ok(manifest.all_ok())
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    #[cfg(not(feature = "parallel"))]
    if threads.is_some() {
        eprintln!("warning: built without the parallel feature; --threads is ignored");
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match config::merge(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = configure_threads(cli.threads).and_then(|()| match cli.command {
        Command::Suite => run_suite(&cli).and_then(|ok| {
            if ok {
                Ok(())
            } else {
                Err(anyhow!("one or more suite commands failed; see the manifest"))
            }
        }),
        _ => run_single(&cli),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

