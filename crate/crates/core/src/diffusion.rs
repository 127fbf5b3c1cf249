//! Exact-score denoising diffusion over Gaussian-mixture data.
//!
//! The data model is an isotropic Gaussian mixture
//! `p(x) = Σ_k w_k N(x; μ_k, σ_k² I)`. Under the variance-preserving forward
//! process `x_t = √ᾱ_t x_0 + √(1-ᾱ_t) ε` the marginal at step `t` is again a
//! mixture, with means `√ᾱ_t μ_k` and variances `ᾱ_t σ_k² + 1 - ᾱ_t`, so the
//! score `∇ log p_t` is available in closed form and the reverse process
//! needs no learned denoiser.
//!
//! # Reverse update
//!
//! The default sampler is the deterministic probability-flow (DDIM, η = 0)
//! step driven by the exact score `g = ∇ log p_t(x_t)`:
//!
//! ```text
//! x̂_0     = (x_t + (1 - ᾱ_t) g) / √ᾱ_t
//! ε̂       = -√(1 - ᾱ_t) g
//! x_{t-1} = √ᾱ_{t-1} x̂_0 + √(1 - ᾱ_{t-1}) ε̂
//! ```
//!
//! When `g = 0` this collapses to the pure rescaling `x_{t-1} = √(ᾱ_{t-1}/ᾱ_t) x_t`.
//!
//! The ancestral variant is the DDPM posterior step with the same score:
//!
//! ```text
//! x_{t-1} = (x_t + β_t g) / √(1 - β_t) + √β̃_t z,   β̃_t = β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t)
//! ```

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of diffusion steps in the schedule.
pub const DEFAULT_STEP_COUNT: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-3;
pub const DEFAULT_BETA_END: f64 = 0.15;

/// Default data model dimension.
pub const DEFAULT_DIMENSION: usize = 64;

/// A real feature vector standing in for an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn zeros(dim: usize) -> Self {
        FeatureVector(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn distance(&self, other: &FeatureVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(v: Vec<f64>) -> Self {
        FeatureVector(v)
    }
}

impl std::ops::Index<usize> for FeatureVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Per-step noise coefficients and their cumulative products.
///
/// `beta[t-1]` is the noise added by forward step `t` (1-based);
/// `alpha_bar[t]` is the signal retained after `t` steps, with
/// `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation of `beta` from `beta_start` to `beta_end`.
    pub fn linear(step_count: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if step_count == 0 {
            return Err(Error::invalid("step_count", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::invalid(
                "beta_start",
                format!("{beta_start} not in (0,1)"),
            ));
        }
        if !(beta_end > 0.0 && beta_end < 1.0) {
            return Err(Error::invalid(
                "beta_end",
                format!("{beta_end} not in (0,1)"),
            ));
        }
        if beta_start > beta_end {
            return Err(Error::invalid("beta_start", "must not exceed beta_end"));
        }
        let beta = if step_count == 1 {
            vec![beta_start]
        } else {
            let span = (step_count - 1) as f64;
            (0..step_count)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
                .collect()
        };
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("beta", "schedule needs at least one step"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid("beta", format!("{b} not in (0,1)")));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let decreasing = alpha_bar.windows(2).all(|w| w[1] < w[0]);
        if !decreasing || acc <= 0.0 {
            return Err(Error::invalid(
                "beta",
                "cumulative signal retention underflows; schedule too long or too noisy",
            ));
        }
        Ok(NoiseSchedule { beta, alpha_bar })
    }

    pub fn step_count(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.step_count() {
            Err(Error::StepOutOfRange {
                step: t,
                max: self.step_count(),
            })
        } else {
            Ok(())
        }
    }

    /// Samples `x_t = √ᾱ_t x + √(1-ᾱ_t) ε`. Index 0 returns `x` untouched.
    pub fn forward_noise<R: Rng + ?Sized>(
        &self,
        x: &FeatureVector,
        t: usize,
        rng: &mut R,
    ) -> Result<FeatureVector> {
        self.check_step(t)?;
        if t == 0 {
            return Ok(x.clone());
        }
        let ab = self.alpha_bar[t];
        let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x.0
            .iter()
            .map(|v| signal * v + noise * rng.sample::<f64, _>(StandardNormal))
            .collect::<Vec<_>>()
            .into())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(DEFAULT_STEP_COUNT, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// Isotropic Gaussian mixture. Component index is the class label.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianMixture {
    components: Vec<Component>,
    dim: usize,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::invalid("components", "mixture needs at least one component"))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::invalid("mean", "dimension must be at least 1"));
        }
        for c in &components {
            if c.mean.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: c.mean.len(),
                });
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::invalid(
                    "weight",
                    format!("{} must be positive", c.weight),
                ));
            }
            if !(c.variance > 0.0 && c.variance.is_finite()) {
                return Err(Error::invalid(
                    "variance",
                    format!("{} must be positive", c.variance),
                ));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::invalid("mean", "entries must be finite"));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(
                "weight",
                format!("weights sum to {total}, not 1"),
            ));
        }
        Ok(GaussianMixture { components, dim })
    }

    /// The default defended data model: a tight majority class around `-e₁`
    /// and a broad minority class around `+e₁` in 64 dimensions.
    ///
    /// The tight class occupies a thin radial shell, so perturbations that
    /// push its members across the Bayes boundary leave the shell and are
    /// pulled back by moderate re-noising.
    pub fn default_model() -> Self {
        let dim = DEFAULT_DIMENSION;
        let axis = |s: f64| {
            let mut m = vec![0.0; dim];
            m[0] = s;
            m
        };
        GaussianMixture::new(vec![
            Component {
                weight: 0.72,
                mean: axis(-1.0),
                variance: 0.05,
            },
            Component {
                weight: 0.28,
                mean: axis(1.0),
                variance: 1.0,
            },
        ])
        .expect("default mixture is valid")
    }

    /// Two equal-weight unit-variance components at `(±1, 0)`.
    ///
    /// The Bayes error of this mixture is `Φ(-1) ≈ 0.1587`. Its reflection
    /// symmetry means probability-flow purification can never move a point
    /// across the decision boundary in expectation, which is why it is not
    /// the defended default.
    pub fn symmetric_pair() -> Self {
        GaussianMixture::new(vec![
            Component {
                weight: 0.5,
                mean: vec![-1.0, 0.0],
                variance: 1.0,
            },
            Component {
                weight: 0.5,
                mean: vec![1.0, 0.0],
                variance: 1.0,
            },
        ])
        .expect("symmetric mixture is valid")
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    fn check_dim(&self, x: &FeatureVector) -> Result<()> {
        if x.len() != self.dim {
            Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            })
        } else {
            Ok(())
        }
    }

    /// `ln w_k + ln N(x; √ᾱ μ_k, (ᾱ σ_k² + 1 - ᾱ) I)` for every component.
    /// `alpha_bar = 1` gives the clean mixture.
    fn log_joint_into(&self, x: &[f64], alpha_bar: f64, out: &mut Vec<f64>) {
        out.clear();
        let scale = alpha_bar.sqrt();
        let n = self.dim as f64;
        for c in &self.components {
            let var = noised_variance(c.variance, alpha_bar);
            let sq: f64 = x
                .iter()
                .zip(&c.mean)
                .map(|(xi, mi)| {
                    let d = xi - scale * mi;
                    d * d
                })
                .sum();
            out.push(c.weight.ln() - 0.5 * sq / var - 0.5 * n * (LN_2PI + var.ln()));
        }
    }

    pub(crate) fn responsibilities_at(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        let mut logs = Vec::with_capacity(self.components.len());
        self.log_joint_into(x, alpha_bar, &mut logs);
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logs.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        logs.iter_mut().for_each(|l| *l /= total);
        logs
    }

    fn score_at(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        let resp = self.responsibilities_at(x, alpha_bar);
        let scale = alpha_bar.sqrt();
        let mut score = vec![0.0; self.dim];
        for (c, r) in self.components.iter().zip(&resp) {
            let coef = r / noised_variance(c.variance, alpha_bar);
            for ((s, xi), mi) in score.iter_mut().zip(x).zip(&c.mean) {
                *s += coef * (scale * mi - xi);
            }
        }
        score
    }

    /// `log Σ_k w_k N(x; μ_k, σ_k² I)` via log-sum-exp.
    pub fn log_density(&self, x: &FeatureVector) -> Result<f64> {
        self.check_dim(x)?;
        let mut logs = Vec::with_capacity(self.components.len());
        self.log_joint_into(&x.0, 1.0, &mut logs);
        Ok(log_sum_exp(&logs))
    }

    /// `∇ₓ log p(x) = Σ_k r_k(x) (μ_k - x) / σ_k²`.
    pub fn score(&self, x: &FeatureVector) -> Result<FeatureVector> {
        self.check_dim(x)?;
        Ok(self.score_at(&x.0, 1.0).into())
    }

    /// Score of the forward-process marginal at signal level `alpha_bar`,
    /// without materializing [`GaussianMixture::noised`].
    pub fn noised_score(&self, x: &FeatureVector, alpha_bar: f64) -> Result<FeatureVector> {
        self.check_dim(x)?;
        check_alpha_bar(alpha_bar)?;
        Ok(self.score_at(&x.0, alpha_bar).into())
    }

    pub fn responsibilities(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.responsibilities_at(&x.0, 1.0))
    }

    /// Bayes classifier: the component with the largest posterior
    /// responsibility. Ties go to the lowest index.
    pub fn classify(&self, x: &FeatureVector) -> Result<usize> {
        self.check_dim(x)?;
        let mut logs = Vec::with_capacity(self.components.len());
        self.log_joint_into(&x.0, 1.0, &mut logs);
        let mut best = 0;
        for (k, l) in logs.iter().enumerate().skip(1) {
            if *l > logs[best] {
                best = k;
            }
        }
        Ok(best)
    }

    /// Marginal of the forward process at signal level `alpha_bar`.
    pub fn noised(&self, alpha_bar: f64) -> Result<GaussianMixture> {
        check_alpha_bar(alpha_bar)?;
        let scale = alpha_bar.sqrt();
        let components = self
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight,
                mean: c.mean.iter().map(|m| scale * m).collect(),
                variance: noised_variance(c.variance, alpha_bar),
            })
            .collect();
        Ok(GaussianMixture {
            components,
            dim: self.dim,
        })
    }

    /// Draws `(label, x)` with `label ~ weights` and `x ~ N(μ_label, σ² I)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, FeatureVector) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut label = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                label = k;
                break;
            }
        }
        (label, self.sample_component(label, rng))
    }

    pub fn sample_component<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> FeatureVector {
        let c = &self.components[label];
        let sd = c.variance.sqrt();
        c.mean
            .iter()
            .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
            .collect::<Vec<_>>()
            .into()
    }
}

impl Default for GaussianMixture {
    fn default() -> Self {
        GaussianMixture::default_model()
    }
}

fn noised_variance(variance: f64, alpha_bar: f64) -> f64 {
    alpha_bar * variance + (1.0 - alpha_bar)
}

fn check_alpha_bar(alpha_bar: f64) -> Result<()> {
    if alpha_bar > 0.0 && alpha_bar <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            "alpha_bar",
            format!("{alpha_bar} not in (0,1]"),
        ))
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseSampler {
    #[default]
    ProbabilityFlow,
    Ancestral,
}

/// Data model, schedule and sampler bundled for purification.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffusionKernel {
    pub mixture: GaussianMixture,
    pub schedule: NoiseSchedule,
    pub sampler: ReverseSampler,
}

impl Default for DiffusionKernel {
    fn default() -> Self {
        DiffusionKernel {
            mixture: GaussianMixture::default_model(),
            schedule: NoiseSchedule::default(),
            sampler: ReverseSampler::ProbabilityFlow,
        }
    }
}

impl DiffusionKernel {
    pub fn new(mixture: GaussianMixture, schedule: NoiseSchedule) -> Self {
        DiffusionKernel {
            mixture,
            schedule,
            sampler: ReverseSampler::ProbabilityFlow,
        }
    }

    pub fn with_sampler(mut self, sampler: ReverseSampler) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn step_count(&self) -> usize {
        self.schedule.step_count()
    }

    fn check_reverse_step(&self, x: &FeatureVector, t: usize) -> Result<()> {
        if t == 0 || t > self.step_count() {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.step_count(),
            });
        }
        self.mixture.check_dim(x)
    }

    /// One deterministic probability-flow step from index `t` to `t - 1`.
    pub fn reverse_step(&self, x_t: &FeatureVector, t: usize) -> Result<FeatureVector> {
        self.check_reverse_step(x_t, t)?;
        Ok(self.flow_step(&x_t.0, t).into())
    }

    /// One stochastic DDPM step from index `t` to `t - 1`.
    pub fn reverse_step_ancestral<R: Rng + ?Sized>(
        &self,
        x_t: &FeatureVector,
        t: usize,
        rng: &mut R,
    ) -> Result<FeatureVector> {
        self.check_reverse_step(x_t, t)?;
        Ok(self.ancestral_step(&x_t.0, t, rng).into())
    }

    fn flow_step(&self, x: &[f64], t: usize) -> Vec<f64> {
        let ab = self.schedule.alpha_bar[t];
        let ab_prev = self.schedule.alpha_bar[t - 1];
        let score = self.mixture.score_at(x, ab);
        let (sa, sa_prev) = (ab.sqrt(), ab_prev.sqrt());
        let (sn, sn_prev) = ((1.0 - ab).sqrt(), (1.0 - ab_prev).sqrt());
        x.iter()
            .zip(&score)
            .map(|(xi, gi)| {
                let x0 = (xi + (1.0 - ab) * gi) / sa;
                let eps = -sn * gi;
                sa_prev * x0 + sn_prev * eps
            })
            .collect()
    }

    fn ancestral_step<R: Rng + ?Sized>(&self, x: &[f64], t: usize, rng: &mut R) -> Vec<f64> {
        let ab = self.schedule.alpha_bar[t];
        let ab_prev = self.schedule.alpha_bar[t - 1];
        let beta = self.schedule.beta[t - 1];
        let score = self.mixture.score_at(x, ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        let inv = 1.0 / (1.0 - beta).sqrt();
        x.iter()
            .zip(&score)
            .map(|(xi, gi)| {
                let z: f64 = if t > 1 {
                    rng.sample(StandardNormal)
                } else {
                    0.0
                };
                inv * (xi + beta * gi) + sigma * z
            })
            .collect()
    }

    /// Noises `x` to index `s`, then denoises back to index 0.
    /// `s = 0` is the identity.
    pub fn purify<R: Rng + ?Sized>(
        &self,
        x: &FeatureVector,
        s: usize,
        rng: &mut R,
    ) -> Result<FeatureVector> {
        self.mixture.check_dim(x)?;
        let mut cur = self.schedule.forward_noise(x, s, rng)?;
        self.denoise_from(&mut cur, s, rng);
        Ok(cur)
    }

    /// Runs the reverse chain from index `s` down to 0 in place.
    pub fn denoise_from<R: Rng + ?Sized>(&self, x: &mut FeatureVector, s: usize, rng: &mut R) {
        for t in (1..=s).rev() {
            x.0 = match self.sampler {
                ReverseSampler::ProbabilityFlow => self.flow_step(&x.0, t),
                ReverseSampler::Ancestral => self.ancestral_step(&x.0, t, rng),
            };
        }
    }
}
