//! Step-count selection over the episode-energy bandit.
//!
//! Each arm is a step count `s ∈ 0..=s_max`; pulling it simulates one full
//! request and returns its total energy. The reward is `-E_total` exactly.
//!
//! Learners draw actions from their own stream and run each iteration's
//! rollouts in parallel, rollout `j` of iteration `i` seeded by its global
//! index, so curves do not depend on the worker count.

mod diffusion_policy;
mod mlp;
mod ppo;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use diffusion_policy::train_diffusion_policy;
pub use mlp::{mlp_grad_check, Adam, Forward, Mlp};
pub use ppo::train_ppo;

use crate::analytic::RateCurve;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::protocol::{self, ScenarioConfig, VerifierBackend};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
enum Arms {
    /// Per-arm `(d, f)` from a rate curve, simulated with the parametric
    /// verifier.
    Rates {
        base: ScenarioConfig,
        curve: RateCurve,
    },
    /// Real purification with the scenario kernel.
    Kernel { base: ScenarioConfig },
    /// Pulling arm `a` always returns `energies[a]`.
    Fixed { energies: Vec<f64> },
}

/// Single-state bandit over step counts.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditEnv {
    arms: Arms,
    n_arms: usize,
}

impl BanditEnv {
    pub fn from_curve(base: ScenarioConfig, curve: RateCurve, s_max: usize) -> Result<Self> {
        if s_max > curve.s_max() {
            return Err(Error::invalid(
                "s_max",
                format!("curve ends at {}", curve.s_max()),
            ));
        }
        base.validate()?;
        Ok(BanditEnv {
            arms: Arms::Rates { base, curve },
            n_arms: s_max + 1,
        })
    }

    pub fn kernel(base: ScenarioConfig, s_max: usize) -> Result<Self> {
        if s_max > base.kernel.step_count() {
            return Err(Error::StepOutOfRange {
                step: s_max,
                max: base.kernel.step_count(),
            });
        }
        let probe = ScenarioConfig {
            verifier_backend: VerifierBackend::Kernel,
            ..base.clone()
        };
        probe.validate()?;
        Ok(BanditEnv {
            arms: Arms::Kernel { base: probe },
            n_arms: s_max + 1,
        })
    }

    pub fn fixed(energies: Vec<f64>) -> Result<Self> {
        if energies.is_empty() {
            return Err(Error::EmptyDomain);
        }
        if energies.iter().any(|e| !e.is_finite()) {
            return Err(Error::invalid("energies", "must be finite"));
        }
        Ok(BanditEnv {
            n_arms: energies.len(),
            arms: Arms::Fixed { energies },
        })
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    /// Scenario used for arm `s`.
    pub fn arm_config(&self, s: usize) -> Option<ScenarioConfig> {
        match &self.arms {
            Arms::Rates { base, curve } => {
                let pt = curve.get(s)?;
                Some(ScenarioConfig {
                    s,
                    verifier_backend: VerifierBackend::Parametric {
                        detection: pt.detection,
                        false_positive: pt.false_positive,
                    },
                    ..base.clone()
                })
            }
            Arms::Kernel { base } => Some(ScenarioConfig { s, ..base.clone() }),
            Arms::Fixed { .. } => None,
        }
    }

    /// Energy (Wh) of one episode at arm `arm`.
    pub fn pull<R: Rng + ?Sized>(&self, arm: usize, rng: &mut R) -> Result<f64> {
        if arm >= self.n_arms {
            return Err(Error::StepOutOfRange {
                step: arm,
                max: self.n_arms - 1,
            });
        }
        match &self.arms {
            Arms::Fixed { energies } => Ok(energies[arm]),
            _ => {
                let config = self.arm_config(arm).expect("simulated arm");
                Ok(protocol::simulate_episode(&config, rng)?.ledger.e_total_wh)
            }
        }
    }

    fn rollouts(
        &self,
        actions: &[usize],
        seed: u64,
        first_index: u64,
        exec: Exec,
    ) -> Result<Vec<f64>> {
        exec.try_map(actions.len(), |j| {
            let mut rng = seed::rng_for(seed, Stream::Rollout, first_index + j as u64);
            self.pull(actions[j], &mut rng)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean_energy: f64,
    pub stderr: f64,
}

/// Mean episode energy per training iteration.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainingCurve {
    pub points: Vec<CurvePoint>,
}

impl TrainingCurve {
    fn push(&mut self, iteration: usize, energies: &[f64]) {
        let s = protocol::MeanSe::of(energies.iter().copied());
        self.points.push(CurvePoint {
            iteration,
            mean_energy: s.mean,
            stderr: s.se,
        });
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mean over the last `window` iterations and its standard error,
    /// treating iterations as independent batches of equal size.
    pub fn final_window(&self, window: usize) -> (f64, f64) {
        let w = window.clamp(1, self.points.len().max(1));
        let tail = &self.points[self.points.len().saturating_sub(w)..];
        let n = tail.len() as f64;
        let mean = tail.iter().map(|p| p.mean_energy).sum::<f64>() / n;
        let se = tail.iter().map(|p| p.stderr * p.stderr).sum::<f64>().sqrt() / n;
        (mean, se)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub clip_ratio: f64,
    /// Surrogate optimization passes per PPO batch.
    pub epochs: usize,
    /// Refinement steps of the diffusion policy.
    pub chain_length: usize,
    pub hidden: usize,
    /// Replace the diffusion policy's refinement network with the identity.
    pub identity_refinement: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            batch: 32,
            learning_rate: 1e-2,
            clip_ratio: 0.2,
            epochs: 4,
            chain_length: 5,
            hidden: 32,
            identity_refinement: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations", "must be at least 1"));
        }
        if self.batch < 8 {
            return Err(Error::invalid("batch", format!("{} < 8", self.batch)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return Err(Error::invalid(
                "clip_ratio",
                format!("{} not in (0,1)", self.clip_ratio),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if self.chain_length == 0 {
            return Err(Error::invalid("chain_length", "must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden", "must be at least 1"));
        }
        Ok(())
    }
}

/// Final policy of a trainer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyParams {
    /// Action logits for PPO; the chain's starting latent for the diffusion
    /// policy.
    pub latent: Vec<f64>,
    /// Refinement network of the diffusion policy.
    pub refinement: Option<Mlp>,
    pub probabilities: Vec<f64>,
}

impl PolicyParams {
    pub fn best_arm(&self) -> usize {
        argmax(&self.probabilities)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trained {
    pub policy: PolicyParams,
    pub curve: TrainingCurve,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Inverse-CDF draw; the last index absorbs rounding.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Rewards standardized within the batch; all zero when they are constant.
fn normalized_advantages(energies: &[f64]) -> Vec<f64> {
    let s = protocol::MeanSe::of(energies.iter().map(|e| -e));
    let sd = s.se * (energies.len() as f64).sqrt();
    energies
        .iter()
        .map(|e| if sd > 1e-12 { (-e - s.mean) / sd } else { 0.0 })
        .collect()
}

fn check_finite(iteration: usize, what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::TrainingFailure {
            iteration,
            reason: format!("non-finite {what}"),
        })
    }
}

/// Uniform actions, `batch` pulls per iteration.
pub fn run_random(
    env: &BanditEnv,
    iterations: usize,
    batch: usize,
    seed: u64,
    exec: Exec,
) -> Result<TrainingCurve> {
    if iterations == 0 || batch == 0 {
        return Err(Error::invalid("pulls", "need at least one pull"));
    }
    let mut curve = TrainingCurve::default();
    for it in 0..iterations {
        let mut rng = seed::rng_for(seed, Stream::Random, it as u64);
        let actions: Vec<usize> = (0..batch)
            .map(|_| rng.random_range(0..env.n_arms()))
            .collect();
        let energies = env.rollouts(&actions, seed, (it * batch) as u64, exec)?;
        curve.push(it, &energies);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArmStats {
    pub arm: usize,
    pub mean_energy: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExhaustiveResult {
    pub best: usize,
    pub arms: Vec<ArmStats>,
}

impl ExhaustiveResult {
    pub fn best_stats(&self) -> ArmStats {
        self.arms[self.best]
    }
}

/// Monte Carlo mean of every arm with 95% intervals. Episode `j` of every
/// arm shares a seed, so arm comparisons use common random numbers.
pub fn exhaustive_search(
    env: &BanditEnv,
    episodes_per_arm: usize,
    seed: u64,
    exec: Exec,
) -> Result<ExhaustiveResult> {
    if episodes_per_arm < 30 {
        return Err(Error::invalid(
            "episodes_per_arm",
            format!("{episodes_per_arm} < 30"),
        ));
    }
    let n = env.n_arms();
    let energies = exec.try_map(n * episodes_per_arm, |k| {
        let (arm, j) = (k / episodes_per_arm, k % episodes_per_arm);
        let mut rng = seed::rng_for(seed, Stream::Exhaustive, j as u64);
        env.pull(arm, &mut rng)
    })?;
    let arms: Vec<ArmStats> = energies
        .chunks(episodes_per_arm)
        .enumerate()
        .map(|(arm, e)| {
            let s = protocol::MeanSe::of(e.iter().copied());
            ArmStats {
                arm,
                mean_energy: s.mean,
                stderr: s.se,
                ci_low: s.mean - 1.96 * s.se,
                ci_high: s.mean + 1.96 * s.se,
            }
        })
        .collect();
    let mut best = 0;
    for a in &arms {
        if a.mean_energy < arms[best].mean_energy {
            best = a.arm;
        }
    }
    Ok(ExhaustiveResult { best, arms })
}
