//! Command-line front end. [`run`] returns the process exit code:
//! 0 on success, 2 when the command could not run, 3 when an experiment
//! ran and failed its bands.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ginar::{embed, ginar_report, GinarSpec};
use crate::model::BranchingModel;
use crate::moments::{moment_report, stationary_moments};
use crate::simulate::{aggregate, simulate_ensemble, simulate_path, stream_rng, BurnIn, Init};
use crate::verify::{
    autocovariance_check, clt_covariance_experiment, compare_orders, ergodic_check,
    innovation_diagnostics, iterated_experiment, ExperimentConfig, LimitOrder, VerificationReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_FAIL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "bpagg",
    version,
    about = "Moments, simulation and limit-theorem checks for multitype branching processes with immigration"
)]
pub struct Cli {
    /// Worker threads; never changes results.
    #[arg(long, global = true, env = "BPAGG_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact stationary moments, V, var(X_0) and Σ.
    Moments {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=3))]
        order: u8,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Independent stationary copies of the chain.
    Simulate {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Centered space-time aggregate on a time grid.
    Aggregate {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1.0")]
        grid: Vec<f64>,
        /// Report raw centered sums instead of (nN)^{-1/2}-scaled ones.
        #[arg(long)]
        unscaled: bool,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo checks against exact targets.
    Verify {
        #[command(subcommand)]
        check: VerifyCommand,
    },
    /// Order-p integer autoregression: embedding, characteristic polynomial, V and Σ.
    Ginar {
        /// JSON spec {"order", "offspring", "immigration"}.
        #[arg(long, conflicts_with = "means", required_unless_present = "means")]
        spec: Option<PathBuf>,
        /// Bernoulli offspring means, e.g. 0.5,0.3.
        #[arg(long, value_delimiter = ',')]
        means: Option<Vec<f64>>,
        /// Poisson immigration mean used with --means.
        #[arg(long, default_value_t = 1.0)]
        immigration_mean: f64,
        /// Also write the embedded p-type model here.
        #[arg(long)]
        embed_out: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub copies: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "auto")]
    pub burnin: BurnInArg,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 50)]
    pub copies: usize,
    #[arg(long, default_value_t = 2000)]
    pub reps: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1.0")]
    pub grid: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "auto")]
    pub burnin: BurnInArg,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PathArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 1_000_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum VerifyCommand {
    /// Time averages of x, x⊗x, x⊗x⊗x along one path.
    Ergodic {
        #[command(flatten)]
        path: PathArgs,
    },
    /// Lagged covariances along one path.
    Autocov {
        #[command(flatten)]
        path: PathArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5")]
        lags: Vec<usize>,
    },
    /// Conditional and global innovation covariances along one path.
    Innovations {
        #[command(flatten)]
        path: PathArgs,
    },
    /// Covariance and normality of the scaled aggregate across replications.
    Clt {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// One limit approximated by a large fixed value, the other swept.
    Iterated {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long = "limit-order", value_enum, default_value_t = OrderArg::Both)]
        limit_order: OrderArg,
        /// Fixed value of the inner parameter.
        #[arg(long, default_value_t = 200)]
        inner: usize,
        /// Outer parameter values; the last one decides pass/fail.
        #[arg(long, value_delimiter = ',', default_value = "12,25,50")]
        sweep: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderArg {
    #[value(name = "N-first")]
    CopiesFirst,
    #[value(name = "n-first")]
    TimeFirst,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BurnInArg(pub BurnIn);

impl FromStr for BurnInArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(Self(BurnIn::Auto));
        }
        s.parse()
            .map(|k| Self(BurnIn::Fixed(k)))
            .map_err(|_| format!("expected 'auto' or a step count, got '{s}'"))
    }
}

/// Parses `args` (including the program name) and executes the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        pool = pool.num_threads(t);
    }
    let pool = match pool.build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    match pool.install(|| execute(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Moments { model, order, out } => {
            let model = BranchingModel::from_path(&model)?;
            let report = moment_report(&model, order.into())?;
            emit_json(&report, out.as_deref())?;
            Ok(EXIT_OK)
        }
        Command::Simulate { sim, format, out } => {
            let model = BranchingModel::from_path(&sim.model)?;
            let ens = simulate_ensemble(
                &model,
                sim.copies,
                sim.n,
                sim.seed,
                Init::Burnin(sim.burnin.0),
            )?;
            match format {
                Format::Json => emit_json(&ens, out.as_deref())?,
                Format::Csv => {
                    emit_with(out.as_deref(), |w| ens.write_csv(w))?;
                    if let Some(out) = &out {
                        write_json(&ens.metadata(), &out.with_extension("meta.json"))?;
                    }
                }
            }
            Ok(EXIT_OK)
        }
        Command::Aggregate {
            sim,
            grid,
            unscaled,
            format,
            out,
        } => {
            let model = BranchingModel::from_path(&sim.model)?;
            let mean = stationary_moments(&model, 1)?.mean;
            let ens = simulate_ensemble(
                &model,
                sim.copies,
                sim.n,
                sim.seed,
                Init::Burnin(sim.burnin.0),
            )?;
            let series = aggregate(&ens, &mean, &grid, !unscaled)?;
            match format {
                Format::Json => emit_json(&series, out.as_deref())?,
                Format::Csv => emit_with(out.as_deref(), |w| series.write_csv(w, model.p))?,
            }
            Ok(EXIT_OK)
        }
        Command::Verify { check } => {
            let (report, format, out) = run_verify(check)?;
            emit_report(&report, format, out.as_deref())?;
            eprintln!(
                "{}: {} (max |z| = {:.3}, {:.2}s)",
                report.experiment,
                if report.pass { "PASS" } else { "FAIL" },
                report.max_abs_z(),
                report.runtime.as_secs_f64()
            );
            Ok(if report.pass { EXIT_OK } else { EXIT_FAIL })
        }
        Command::Ginar {
            spec,
            means,
            immigration_mean,
            embed_out,
            out,
        } => {
            let spec = match (spec, means) {
                (Some(path), _) => GinarSpec::from_path(path)?,
                (None, Some(means)) => GinarSpec::from_means(&means, immigration_mean)?,
                (None, None) => unreachable!("clap requires one of --spec, --means"),
            };
            if let Some(path) = embed_out {
                write_json(&embed(&spec), &path)?;
            }
            emit_json(&ginar_report(&spec)?, out.as_deref())?;
            Ok(EXIT_OK)
        }
    }
}

fn experiment_config(exp: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::new(exp.n, exp.copies, exp.reps, exp.grid.clone(), exp.seed)?;
    cfg.burnin = exp.burnin.0;
    Ok(cfg)
}

fn run_verify(check: VerifyCommand) -> Result<(VerificationReport, Format, Option<PathBuf>)> {
    Ok(match check {
        VerifyCommand::Ergodic { path } => {
            let model = BranchingModel::from_path(&path.model)?;
            (
                ergodic_check(&model, path.n, path.seed)?,
                path.format,
                path.out,
            )
        }
        VerifyCommand::Autocov { path, lags } => {
            let model = BranchingModel::from_path(&path.model)?;
            (
                autocovariance_check(&model, path.n, &lags, path.seed)?,
                path.format,
                path.out,
            )
        }
        VerifyCommand::Innovations { path } => {
            let model = BranchingModel::from_path(&path.model)?;
            let mut rng = stream_rng(path.seed, 0);
            let sample = simulate_path(&model, path.n, &mut rng, Init::auto())?;
            let mut report = innovation_diagnostics(&model, &sample)?;
            report.master_seed = path.seed;
            (report, path.format, path.out)
        }
        VerifyCommand::Clt { exp } => {
            let model = BranchingModel::from_path(&exp.model)?;
            let cfg = experiment_config(&exp)?;
            (
                clt_covariance_experiment(&model, &cfg)?,
                exp.format,
                exp.out,
            )
        }
        VerifyCommand::Iterated {
            exp,
            limit_order,
            inner,
            sweep,
        } => {
            let model = BranchingModel::from_path(&exp.model)?;
            let cfg = experiment_config(&exp)?;
            let run = |order| iterated_experiment(&model, &cfg, order, inner, &sweep);
            let report = match limit_order {
                OrderArg::CopiesFirst => run(LimitOrder::CopiesFirst)?,
                OrderArg::TimeFirst => run(LimitOrder::TimeFirst)?,
                OrderArg::Both => {
                    let a = run(LimitOrder::CopiesFirst)?;
                    let b = run(LimitOrder::TimeFirst)?;
                    let mut both = compare_orders(&a, &b)?;
                    both.runtime += a.runtime + b.runtime;
                    both
                }
            };
            (report, exp.format, exp.out)
        }
    })
}

/// JSON goes to `out` with a companion CSV next to it; CSV alone otherwise.
pub fn emit_report(report: &VerificationReport, format: Format, out: Option<&Path>) -> Result<()> {
    match format {
        Format::Json => {
            emit_json(report, out)?;
            if let Some(out) = out {
                let file = std::fs::File::create(out.with_extension("csv"))?;
                report.write_csv(std::io::BufWriter::new(file))?;
            }
            Ok(())
        }
        Format::Csv => emit_with(out, |w| report.write_csv(w)),
    }
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => write_json(value, path),
        None => {
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, value)?;
            writeln!(stdout)?;
            Ok(())
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_context(e, path))
}

fn emit_with(out: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| io_context(e, path))?;
            let mut w = std::io::BufWriter::new(file);
            f(&mut w)?;
            w.flush()?;
            Ok(())
        }
        None => f(&mut std::io::stdout().lock()),
    }
}

fn io_context(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}
