//! Provider-side detector: purify, classify, compare against the claimed label.

use std::collections::HashMap;

use rand::Rng;
use serde::Serialize;

use crate::analytic::RateCurve;
use crate::diffusion::{DiffusionKernel, FeatureVector};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::seed::{self, Stream};
use crate::threat::{self, AttackParams, PoisonedSample};

/// Step count minimizing mechanistic expected energy for the default
/// kernel, attack and scenario. Detection keeps rising slowly to s ≈ 11,
/// but those steps cost more than the retransmissions they save.
pub const CALIBRATED_STEPS: usize = 5;

pub const MIN_TRIALS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Flag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyDecision {
    pub outcome: Outcome,
    pub purified: FeatureVector,
    pub steps_used: usize,
}

/// The verifier only ever reads `sample.x` and `sample.claimed_label`.
pub fn verify<R: Rng + ?Sized>(
    sample: &PoisonedSample,
    s: usize,
    kernel: &DiffusionKernel,
    rng: &mut R,
) -> Result<VerifyDecision> {
    let purified = kernel.purify(&sample.x, s, rng)?;
    let label = kernel.mixture.classify(&purified)?;
    let outcome = if label == sample.claimed_label {
        Outcome::Pass
    } else {
        Outcome::Flag
    };
    Ok(VerifyDecision {
        outcome,
        purified,
        steps_used: s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateEstimate {
    pub steps: usize,
    pub detection_rate: f64,
    pub detection_se: f64,
    pub false_positive_rate: f64,
    pub false_positive_se: f64,
    pub trials: usize,
}

fn binomial_se(rate: f64, trials: usize) -> f64 {
    (rate * (1.0 - rate) / trials as f64).sqrt()
}

impl RateEstimate {
    fn from_counts(steps: usize, detected: usize, false_flags: usize, trials: usize) -> Self {
        let d = detected as f64 / trials as f64;
        let f = false_flags as f64 / trials as f64;
        RateEstimate {
            steps,
            detection_rate: d,
            detection_se: binomial_se(d, trials),
            false_positive_rate: f,
            false_positive_se: binomial_se(f, trials),
            trials,
        }
    }
}

struct TrialPair {
    clean: PoisonedSample,
    poisoned: PoisonedSample,
}

fn draw_trial(
    kernel: &DiffusionKernel,
    threat: &AttackParams,
    seed: u64,
    i: usize,
) -> Result<TrialPair> {
    let mut rng = seed::rng_for(seed, Stream::RateSample, i as u64);
    let clean = threat::draw_clean(&kernel.mixture, &mut rng);
    let poisoned = threat::draw_poisoned(&kernel.mixture, threat, &mut rng)?;
    Ok(TrialPair { clean, poisoned })
}

fn flags_at(
    kernel: &DiffusionKernel,
    pair: &TrialPair,
    s: usize,
    seed: u64,
    i: usize,
) -> Result<(bool, bool)> {
    // Purification noise depends on the trial index only, so every step
    // count sees the same draws.
    let mut rng = seed::rng_for(seed, Stream::RatePurify, i as u64);
    let caught = verify(&pair.poisoned, s, kernel, &mut rng)?.outcome == Outcome::Flag;
    let false_flag = verify(&pair.clean, s, kernel, &mut rng)?.outcome == Outcome::Flag;
    Ok((caught, false_flag))
}

fn check_trials(trials: usize) -> Result<()> {
    if trials < MIN_TRIALS {
        Err(Error::invalid(
            "trials",
            format!("{trials} trials; at least {MIN_TRIALS} required"),
        ))
    } else {
        Ok(())
    }
}

/// Detection and false-positive rates at `s` from `trials` fresh poisoned
/// and clean items.
pub fn estimate_rates(
    kernel: &DiffusionKernel,
    threat: &AttackParams,
    s: usize,
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<RateEstimate> {
    Ok(estimate_curve(kernel, threat, &[s], trials, seed, exec)?.remove(0))
}

/// Same as [`estimate_rates`] for several step counts, crafting each
/// trial's samples once.
pub fn estimate_curve(
    kernel: &DiffusionKernel,
    threat: &AttackParams,
    steps: &[usize],
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<RateEstimate>> {
    check_trials(trials)?;
    threat.validate()?;
    if let Some(&bad) = steps.iter().find(|&&s| s > kernel.step_count()) {
        return Err(Error::StepOutOfRange {
            step: bad,
            max: kernel.step_count(),
        });
    }
    let per_trial = exec.try_map(trials, |i| {
        let pair = draw_trial(kernel, threat, seed, i)?;
        steps
            .iter()
            .map(|&s| flags_at(kernel, &pair, s, seed, i))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(steps
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let (mut detected, mut false_flags) = (0, 0);
            for row in &per_trial {
                detected += row[j].0 as usize;
                false_flags += row[j].1 as usize;
            }
            RateEstimate::from_counts(s, detected, false_flags, trials)
        })
        .collect())
}

/// Attack success on the raw classifier: fraction of crafted samples the
/// classifier labels with the claimed (target) class.
pub fn attack_success_rate(
    kernel: &DiffusionKernel,
    threat: &AttackParams,
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    check_trials(trials)?;
    let hits = exec.try_map(trials, |i| {
        let pair = draw_trial(kernel, threat, seed, i)?;
        Ok::<_, Error>(kernel.mixture.classify(&pair.poisoned.x)? == pair.poisoned.claimed_label)
    })?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / trials as f64)
}

/// Memoized estimates for one `(kernel, threat)` pair, keyed by
/// `(seed, s, trials)`.
#[derive(Debug, Clone)]
pub struct RateCache {
    kernel: DiffusionKernel,
    threat: AttackParams,
    entries: HashMap<(u64, usize, usize), RateEstimate>,
}

impl RateCache {
    pub fn new(kernel: DiffusionKernel, threat: AttackParams) -> Self {
        RateCache {
            kernel,
            threat,
            entries: HashMap::new(),
        }
    }

    pub fn kernel(&self) -> &DiffusionKernel {
        &self.kernel
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Estimates for every step in `steps`, computing only the missing ones.
    pub fn curve(
        &mut self,
        steps: &[usize],
        trials: usize,
        seed: u64,
        exec: Exec,
    ) -> Result<Vec<RateEstimate>> {
        let missing: Vec<usize> = steps
            .iter()
            .copied()
            .filter(|s| !self.entries.contains_key(&(seed, *s, trials)))
            .collect();
        if !missing.is_empty() {
            let fresh = estimate_curve(&self.kernel, &self.threat, &missing, trials, seed, exec)?;
            for est in fresh {
                self.entries.insert((seed, est.steps, trials), est);
            }
        }
        Ok(steps
            .iter()
            .map(|s| self.entries[&(seed, *s, trials)])
            .collect())
    }

    /// Rate curve over `0..=s_max`.
    pub fn rate_curve(
        &mut self,
        s_max: usize,
        trials: usize,
        seed: u64,
        exec: Exec,
    ) -> Result<RateCurve> {
        let steps: Vec<usize> = (0..=s_max).collect();
        let est = self.curve(&steps, trials, seed, exec)?;
        RateCurve::from_estimates(&est)
    }
}
