//! Run configuration: one TOML document, every field optional.

use std::path::{Path, PathBuf};

use diffshield::diffusion::{Component, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEP_COUNT};
use diffshield::optimizers::TrainConfig;
use diffshield::{DiffusionKernel, GaussianMixture, NoiseSchedule, ReverseSampler, ScenarioConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSpec {
    pub step_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampler: ReverseSampler,
    /// Omitted means the built-in two-class model.
    pub mixture: Option<Vec<Component>>,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            step_count: DEFAULT_STEP_COUNT,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            sampler: ReverseSampler::default(),
            mixture: None,
        }
    }
}

impl KernelSpec {
    pub fn build(&self) -> Result<DiffusionKernel, CliError> {
        let schedule = NoiseSchedule::linear(self.step_count, self.beta_start, self.beta_end)
            .map_err(CliError::config)?;
        let mixture = match &self.mixture {
            Some(c) => GaussianMixture::new(c.clone()).map_err(CliError::config)?,
            None => GaussianMixture::default_model(),
        };
        Ok(DiffusionKernel::new(mixture, schedule).with_sampler(self.sampler))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub episodes: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection { episodes: 100 }
    }
}

/// Inclusive at both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRange {
    pub s_min: usize,
    pub s_max: usize,
}

impl StepRange {
    pub fn steps(&self) -> Vec<usize> {
        (self.s_min..=self.s_max).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub s_min: usize,
    pub s_max: usize,
    /// Monte Carlo episodes per step count.
    pub episodes: usize,
    /// Verifier trials behind the analytic column (kernel backend only).
    pub rate_trials: usize,
}

impl SweepSection {
    pub fn range(&self) -> StepRange {
        StepRange {
            s_min: self.s_min,
            s_max: self.s_max,
        }
    }

    pub fn set_range(&mut self, r: StepRange) {
        (self.s_min, self.s_max) = (r.s_min, r.s_max);
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            s_min: 0,
            s_max: 50,
            episodes: 200,
            rate_trials: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveSection {
    pub s_min: usize,
    pub s_max: usize,
    pub trials: usize,
}

impl CurveSection {
    pub fn range(&self) -> StepRange {
        StepRange {
            s_min: self.s_min,
            s_max: self.s_max,
        }
    }

    pub fn set_range(&mut self, r: StepRange) {
        (self.s_min, self.s_max) = (r.s_min, r.s_max);
    }
}

impl Default for CurveSection {
    fn default() -> Self {
        CurveSection {
            s_min: 0,
            s_max: 50,
            trials: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Ppo,
    Diffusion,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BanditSection {
    pub method: Method,
    /// Arms are step counts `0..=s_max`.
    pub s_max: usize,
    /// Verifier trials per arm when estimating the kernel's rate curve.
    pub rate_trials: usize,
}

impl Default for BanditSection {
    fn default() -> Self {
        BanditSection {
            method: Method::Ppo,
            s_max: 50,
            rate_trials: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream; overrides `scenario.seed` and `train.seed`.
    pub seed: u64,
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub scenario: ScenarioConfig,
    pub kernel: KernelSpec,
    pub simulate: SimulateSection,
    pub sweep: SweepSection,
    pub curve: CurveSection,
    pub bandit: BanditSection,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("."),
            scenario: ScenarioConfig::default(),
            kernel: KernelSpec::default(),
            simulate: SimulateSection::default(),
            sweep: SweepSection::default(),
            curve: CurveSection::default(),
            bandit: BanditSection::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Propagates the root seed, builds the kernel and checks every section.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let kernel = self.kernel.build()?;
        if self.kernel.mixture.is_none() {
            self.kernel.mixture = Some(kernel.mixture.components().to_vec());
        }
        let t_max = kernel.step_count();
        self.scenario.kernel = kernel;
        self.scenario.seed = self.seed;
        self.train.seed = self.seed;
        self.scenario.validate().map_err(CliError::config)?;
        self.train.validate().map_err(CliError::config)?;
        if self.scenario.s > t_max {
            return Err(CliError::Config(format!(
                "scenario.s = {} exceeds the schedule's {t_max} steps",
                self.scenario.s
            )));
        }
        for (name, r) in [("sweep", self.sweep.range()), ("curve", self.curve.range())] {
            if r.s_min > r.s_max || r.s_max > t_max {
                return Err(CliError::Config(format!(
                    "{name} steps {}..{} not within 0..{t_max}",
                    r.s_min, r.s_max
                )));
            }
        }
        if self.bandit.s_max > t_max {
            return Err(CliError::Config(format!(
                "bandit.s_max = {} exceeds {t_max}",
                self.bandit.s_max
            )));
        }
        let counts = [
            ("simulate.episodes", self.simulate.episodes),
            ("sweep.episodes", self.sweep.episodes),
            ("sweep.rate_trials", self.sweep.rate_trials),
            ("curve.trials", self.curve.trials),
            ("bandit.rate_trials", self.bandit.rate_trials),
        ];
        for (name, n) in counts {
            if n == 0 {
                return Err(CliError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(self)
    }

    /// Compact JSON embedded in every output file.
    pub fn audit_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Parses `a..b` (inclusive) or a single step `a`.
pub fn parse_range(text: &str) -> Result<StepRange, String> {
    let num = |s: &str| s.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
    match text.split_once("..") {
        Some((a, b)) => {
            let b = b.strip_prefix('=').unwrap_or(b);
            let r = StepRange {
                s_min: num(a)?,
                s_max: num(b)?,
            };
            if r.s_min > r.s_max {
                return Err(format!("empty range {text}"));
            }
            Ok(r)
        }
        None => {
            let s = num(text)?;
            Ok(StepRange { s_min: s, s_max: s })
        }
    }
}
