//! Command-line harness: `train` runs one configuration and `grid` sweeps
//! the Cartesian product of sizes, inducing counts, methods and seeds.
//!
//! Every run leaves a JSON summary behind, including runs that fail; `train`
//! also writes the trace CSV and a checkpoint.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, Dataset, GpPrior, LabelColumn};
use crate::error::{Error, Result};
use crate::gaussian::Method;
use crate::inference::{self, TraceRecord, TrainConfig};
use crate::oracle;

#[derive(Debug, Parser)]
#[command(name = "sepgp", version, about = "Sparse GP classification with EP, SEP and ADF")]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write its trace, summary and checkpoint.
    Train(TrainArgs),
    /// Run a grid of configurations into a single CSV.
    Grid(GridArgs),
}

/// Inducing-point count, absolute or as a percentage of the training set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InducingSpec {
    Count(usize),
    Percent(f64),
}

impl InducingSpec {
    pub fn resolve(&self, n: usize) -> usize {
        match *self {
            InducingSpec::Count(m) => m,
            InducingSpec::Percent(p) => ((p / 100.0 * n as f64).round() as usize).max(1),
        }
    }
}

impl FromStr for InducingSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot read `{s}` as a count or percentage"));
        match s.strip_suffix('%') {
            Some(p) => {
                let v: f64 = p.trim().parse().map_err(|_| bad())?;
                if !(v > 0.0 && v <= 100.0) {
                    return Err(bad());
                }
                Ok(InducingSpec::Percent(v))
            }
            None => s.trim().parse().map(InducingSpec::Count).map_err(|_| bad()),
        }
    }
}

/// `n,d` for generated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
}

impl FromStr for SyntheticSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        match parts.as_slice() {
            [n, d] => Ok(Self {
                n: n.parse().map_err(|_| Error::Config(format!("bad size `{n}`")))?,
                d: d.parse().map_err(|_| Error::Config(format!("bad dimension `{d}`")))?,
            }),
            _ => Err(Error::Config(format!("expected `n,d`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Training data as CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Label column by header name or zero-based index (default: last).
    #[arg(long)]
    pub label_col: Option<String>,
    /// The CSV has no header row.
    #[arg(long)]
    pub no_header: bool,
    /// Fraction of a CSV dataset held out for testing.
    #[arg(long, default_value_t = 0.2)]
    pub test_frac: f64,
    /// Test-set size for generated data.
    #[arg(long, default_value_t = 1000)]
    pub synthetic_test: usize,
    /// Length-scale of the generating GP.
    #[arg(long, default_value_t = GpPrior::default().lengthscale)]
    pub gp_lengthscale: f64,
    /// Amplitude σ² of the generating GP.
    #[arg(long, default_value_t = GpPrior::default().amplitude)]
    pub gp_amplitude: f64,
    /// Batch mode (the default).
    #[arg(long, conflicts_with = "minibatch")]
    pub batch: bool,
    /// Minibatch size.
    #[arg(long)]
    pub minibatch: Option<usize>,
    /// Passes (batch mode) or epochs (minibatch mode).
    #[arg(long, visible_alias = "epochs")]
    pub iters: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Damping in (0, 1]; defaults to 0.8 in batch and 1.0 in minibatch mode.
    #[arg(long)]
    pub damping: Option<f64>,
    /// Absolute jitter on the inducing gram.
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Keep projection weights cached between updates.
    #[arg(long)]
    pub cache_upsilon: bool,
    /// Keep kernel hyperparameters and inducing inputs fixed.
    #[arg(long)]
    pub fixed_hypers: bool,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value = "sep")]
    pub method: Method,
    /// Inducing points, e.g. `50` or `25%` (default 200, capped at n).
    #[arg(long)]
    pub m: Option<InducingSpec>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Generate `n,d` training points from a GP instead of reading CSV.
    #[arg(long)]
    pub synthetic: Option<SyntheticSpec>,
    /// Run the oracle checks before training.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training-set sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub n_list: Vec<usize>,
    /// Inducing counts or percentages.
    #[arg(long, value_delimiter = ',', required = true)]
    pub m_list: Vec<InducingSpec>,
    #[arg(long, value_delimiter = ',', default_value = "ep,sep,adf")]
    pub methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Input dimension for generated data (used when `--data` is absent).
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Concurrent runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

/// One row of results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub n: usize,
    pub m: usize,
    /// Minibatch size, empty in batch mode.
    pub s: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub test_nll: Option<f64>,
    pub test_err: Option<f64>,
    pub wall_time_s: f64,
    pub memory_factor: usize,
    pub memory_total: usize,
    pub status: String,
    pub error: Option<String>,
}

pub const DEFAULT_M: usize = 200;
pub const DEFAULT_MINIBATCH_EPOCHS: usize = 5;
pub const DEFAULT_BATCH_ITERS: usize = 250;

impl CommonArgs {
    fn label(&self) -> Result<LabelColumn> {
        match &self.label_col {
            None => Ok(LabelColumn::Last),
            Some(s) => s.parse(),
        }
    }

    fn prior(&self) -> GpPrior {
        GpPrior {
            lengthscale: self.gp_lengthscale,
            amplitude: self.gp_amplitude,
        }
    }

    fn config(&self, method: Method, m: usize, seed: u64) -> TrainConfig {
        let iters = self.iters.unwrap_or(match self.minibatch {
            Some(_) => DEFAULT_MINIBATCH_EPOCHS,
            None => DEFAULT_BATCH_ITERS,
        });
        TrainConfig {
            minibatch: self.minibatch,
            damping: self.damping,
            learn_hypers: !self.fixed_hypers,
            learning_rate: self.lr,
            seed,
            jitter: self.jitter,
            cache_upsilon: self.cache_upsilon,
            ..TrainConfig::batch(method, m, iters)
        }
    }

    /// Train/test sets from CSV for one seed.
    fn csv_split(&self, path: &Path, seed: u64) -> Result<(Dataset, Dataset)> {
        let raw = data::load_csv(path, &self.label()?, !self.no_header)?;
        data::standardize_split(&raw, self.test_frac, seed)
    }
}

fn summary_for(config: &TrainConfig, n: usize) -> RunSummary {
    RunSummary {
        method: config.method,
        n,
        m: config.num_inducing,
        s: config.minibatch,
        epochs: config.iterations,
        seed: config.seed,
        test_nll: None,
        test_err: None,
        wall_time_s: 0.0,
        memory_factor: 0,
        memory_total: 0,
        status: "failed".into(),
        error: None,
    }
}

/// Trains one configuration, filling the summary whether or not it succeeds.
fn run_one(
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    records: &mut Vec<TraceRecord>,
) -> (RunSummary, Result<inference::ModelState>) {
    let mut summary = summary_for(config, train.len());
    let t0 = Instant::now();
    let result = inference::fit_observed(train, config, Some(test), &mut |_, r| {
        records.push(*r);
        Ok(())
    });
    summary.wall_time_s = t0.elapsed().as_secs_f64();
    if let Some(last) = records.last() {
        summary.test_nll = last.test_nll;
        summary.test_err = last.test_err;
    }
    match result {
        Ok((state, _)) => {
            let mem = state.memory_footprint();
            summary.memory_factor = mem.factor;
            summary.memory_total = mem.total();
            summary.status = "ok".into();
            (summary, Ok(state))
        }
        Err(e) => {
            summary.error = Some(e.to_string());
            (summary, Err(e))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_records(path: &Path, records: &[TraceRecord]) -> Result<()> {
    inference::TraceLog {
        records: records.to_vec(),
    }
    .write_csv(path)
}

pub fn run_train(args: &TrainArgs) -> Result<RunSummary> {
    let common = &args.common;
    if args.verify {
        let report = oracle::verify()?;
        println!("{}", serde_json::to_string(&report)?);
        if !report.passed {
            return Err(Error::NonFinite("oracle verification"));
        }
    }
    let (train, test) = match (&args.synthetic, &common.data) {
        (Some(spec), None) => data::synthetic_split(spec.n, common.synthetic_test, spec.d, &common.prior(), args.seed)?,
        (None, Some(path)) => common.csv_split(path, args.seed)?,
        _ => return Err(Error::Config("give exactly one of --data or --synthetic".into())),
    };
    let m = match args.m {
        Some(spec) => spec.resolve(train.len()),
        None => DEFAULT_M.min(train.len()),
    };
    let config = common.config(args.method, m, args.seed);
    fs::create_dir_all(&common.out)?;

    let mut records = Vec::new();
    let (summary, state) = run_one(&train, &test, &config, &mut records);
    write_json(&common.out.join("summary.json"), &summary)?;
    write_records(&common.out.join("trace.csv"), &records)?;
    let state = state?;
    checkpoint::save(&state, common.out.join("checkpoint.json"))?;
    Ok(summary)
}

/// One run of the grid, identified by its position in the product.
struct GridJob {
    seed_idx: usize,
    n: usize,
    m: InducingSpec,
    method: Method,
}

pub fn run_grid(args: &GridArgs) -> Result<Vec<RunSummary>> {
    let common = &args.common;
    if args.n_list.is_empty() || args.m_list.is_empty() || args.methods.is_empty() || args.seeds.is_empty() {
        return Err(Error::Config("grid lists must be non-empty".into()));
    }
    if args.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let max_n = *args.n_list.iter().max().expect("non-empty");

    // One pool per seed; every size uses a prefix of it.
    let pools: Vec<Result<(Dataset, Dataset)>> = args
        .seeds
        .iter()
        .map(|&seed| match &common.data {
            Some(path) => common.csv_split(path, seed),
            None => data::synthetic_split(max_n, common.synthetic_test, args.dim, &common.prior(), seed),
        })
        .collect();

    let mut jobs = Vec::new();
    for seed_idx in 0..args.seeds.len() {
        for &n in &args.n_list {
            for &m in &args.m_list {
                for &method in &args.methods {
                    jobs.push(GridJob { seed_idx, n, m, method });
                }
            }
        }
    }

    let run = |job: &GridJob| -> RunSummary {
        let seed = args.seeds[job.seed_idx];
        let m = job.m.resolve(job.n);
        let config = common.config(job.method, m, seed);
        match &pools[job.seed_idx] {
            Ok((train, test)) if job.n <= train.len() => {
                let mut records = Vec::new();
                let (summary, _) = run_one(&train.head(job.n), test, &config, &mut records);
                log::info!(
                    "{} n={} m={} seed={}: {:?}",
                    job.method,
                    job.n,
                    m,
                    seed,
                    summary.test_nll
                );
                summary
            }
            Ok((train, _)) => RunSummary {
                error: Some(format!("only {} training rows available", train.len())),
                ..summary_for(&config, job.n)
            },
            Err(e) => RunSummary {
                error: Some(e.to_string()),
                ..summary_for(&config, job.n)
            },
        }
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let rows: Vec<RunSummary> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect()
    });

    fs::create_dir_all(&common.out)?;
    let mut w = csv::Writer::from_path(common.out.join("grid.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .try_init();

    let outcome = match &cli.command {
        Command::Train(a) => run_train(a).map(|s| {
            println!("{}", serde_json::to_string(&s).unwrap_or_default());
            s.status == "ok"
        }),
        Command::Grid(a) => run_grid(a).map(|rows| {
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!("{} runs, {failed} failed", rows.len());
            true
        }),
    };
    match outcome {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
