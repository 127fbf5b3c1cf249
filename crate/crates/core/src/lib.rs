//! Diffusion-based purification as a poisoning defense for an image
//! request service, with exact energy accounting and step-count optimizers.
//!
//! The data model is a Gaussian mixture whose score is known in closed form,
//! so purification runs the exact reverse diffusion chain with no learned
//! denoiser.

pub mod analytic;
pub mod diffusion;
pub mod error;
pub mod exec;
pub mod optimizers;
pub mod protocol;
pub mod seed;
pub mod threat;
pub mod verifier;

pub use analytic::{AccountingMode, CostModel, RateCurve};
pub use diffusion::{
    DiffusionKernel, FeatureVector, GaussianMixture, NoiseSchedule, ReverseSampler,
};
pub use error::{Error, Result};
pub use exec::Exec;
pub use protocol::{EnergyLedger, EpisodeTrace, ScenarioConfig, VerifierBackend};
pub use threat::{AttackParams, PoisonedSample};
pub use verifier::{RateCache, RateEstimate};
