//! Command-line front end for the diffshield simulator.
//!
//! Every subcommand reads an optional TOML run configuration, applies flag
//! overrides on top, and writes one output file into `--out`. Output files
//! begin with `#` lines recording the root seed and the resolved
//! configuration.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use diffshield::{AccountingMode, ScenarioConfig, VerifierBackend};

pub mod commands;
pub mod config;
mod output;

pub use config::{Method, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] diffshield::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub(crate) fn config(e: diffshield::Error) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(diffshield::Error::InvalidParameter { .. }) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "diffshield",
    version,
    about = "Diffusion-purification defense and retransmission energy simulator"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Mechanistic,
    PaperFigure,
}

/// Scenario overrides shared by the simulating subcommands.
#[derive(Debug, Clone, Default, Args)]
pub struct ScenarioArgs {
    /// Images per request.
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub poison_prob: Option<f64>,
    /// Wh per transmission.
    #[arg(long)]
    pub e_tx: Option<f64>,
    /// Wh per denoising step.
    #[arg(long)]
    pub e_den: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    /// Replace the kernel verifier by fixed rates (needs --false-positive).
    #[arg(long, requires = "false_positive")]
    pub detection: Option<f64>,
    #[arg(long, requires = "detection")]
    pub false_positive: Option<f64>,
}

impl ScenarioArgs {
    fn apply(&self, s: &mut ScenarioConfig) {
        if let Some(v) = self.images {
            s.n_images = v;
        }
        if let Some(v) = self.poison_prob {
            s.poison_prob = v;
        }
        if let Some(v) = self.e_tx {
            s.e_tx = v;
        }
        if let Some(v) = self.e_den {
            s.e_den = v;
        }
        if let Some(m) = self.mode {
            s.accounting_mode = match m {
                ModeArg::Mechanistic => AccountingMode::Mechanistic,
                ModeArg::PaperFigure => AccountingMode::PaperFigure,
            };
        }
        if let Some(v) = self.max_rounds {
            s.max_rounds = v;
        }
        if let (Some(detection), Some(false_positive)) = (self.detection, self.false_positive) {
            s.verifier_backend = VerifierBackend::Parametric {
                detection,
                false_positive,
            };
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run request episodes and write per-round traces to episodes.csv.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Denoising steps per verification.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Analytic and Monte Carlo energy per step count, to sweep.csv.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Inclusive range such as 0..50.
        #[arg(long, value_parser = config::parse_range)]
        steps: Option<config::StepRange>,
        /// Episodes per step count.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        rate_trials: Option<usize>,
    },
    /// Verifier detection and false-positive rates per step count, to rates.csv.
    Curve {
        #[arg(long, value_parser = config::parse_range)]
        steps: Option<config::StepRange>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Train a step-count policy and write training_curve.csv.
    Train {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Largest step count offered as an action.
        #[arg(long)]
        s_max: Option<usize>,
        #[arg(long)]
        rate_trials: Option<usize>,
    },
    /// Recompute the published case-study totals into paper_report.json.
    ReproducePaper,
}

impl Cli {
    /// File configuration with this invocation's flags applied on top.
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            c.out = out.clone();
        }
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        match &self.command {
            Command::Simulate {
                scenario,
                steps,
                episodes,
            } => {
                scenario.apply(&mut c.scenario);
                if let Some(s) = steps {
                    c.scenario.s = *s;
                }
                if let Some(n) = episodes {
                    c.simulate.episodes = *n;
                }
            }
            Command::Sweep {
                scenario,
                steps,
                episodes,
                rate_trials,
            } => {
                scenario.apply(&mut c.scenario);
                if let Some(r) = steps {
                    c.sweep.set_range(*r);
                }
                if let Some(n) = episodes {
                    c.sweep.episodes = *n;
                }
                if let Some(n) = rate_trials {
                    c.sweep.rate_trials = *n;
                }
            }
            Command::Curve { steps, trials } => {
                if let Some(r) = steps {
                    c.curve.set_range(*r);
                }
                if let Some(n) = trials {
                    c.curve.trials = *n;
                }
            }
            Command::Train {
                scenario,
                method,
                iterations,
                batch,
                learning_rate,
                s_max,
                rate_trials,
            } => {
                scenario.apply(&mut c.scenario);
                if let Some(m) = method {
                    c.bandit.method = *m;
                }
                if let Some(n) = iterations {
                    c.train.iterations = *n;
                }
                if let Some(n) = batch {
                    c.train.batch = *n;
                }
                if let Some(v) = learning_rate {
                    c.train.learning_rate = *v;
                }
                if let Some(n) = s_max {
                    c.bandit.s_max = *n;
                }
                if let Some(n) = rate_trials {
                    c.bandit.rate_trials = *n;
                }
            }
            Command::ReproducePaper => {}
        }
        c.resolve()
    }

    pub fn execute(&self) -> Result<String, CliError> {
        let config = self.run_config()?;
        std::fs::create_dir_all(&config.out)?;
        let jobs = self
            .jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        diffshield::exec::with_jobs(jobs, || match &self.command {
            Command::Simulate { .. } => commands::simulate(&config),
            Command::Sweep { .. } => commands::sweep(&config),
            Command::Curve { .. } => commands::curve(&config),
            Command::Train { .. } => commands::train(&config),
            Command::ReproducePaper => commands::reproduce_paper(&config),
        })
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match cli.execute() {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
