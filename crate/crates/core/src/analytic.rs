//! Closed-form expected energy of the fetch/verify/transmit protocol.
//!
//! Each fetch is an independent draw from the server: poisoned with
//! probability `p`. The verifier flags a poisoned item with probability `d`
//! and a clean one with probability `f`. A fetch settles its slot exactly
//! when it is clean and passes, which happens with probability
//! `q = (1-p)(1-f)`, so the number of fetches per delivered image is
//! geometric with mean
//!
//! ```text
//! F = 1 / ((1-p)(1-f))
//! ```
//!
//! A fetch is transmitted whenever it passes, clean or not, so the expected
//! transmissions per delivered image are
//!
//! ```text
//! T = [(1-p)(1-f) + p(1-d)] · F
//! ```
//!
//! Per image, the mechanistic cost verifies every fetch and pays for every
//! transmission, `E/n = F·s·e_den + T·e_tx`. The figure-style cost charges a
//! full `(e_tx + s·e_den)` for every handled fetch, `E/n = F·(e_tx + s·e_den)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::verifier::RateEstimate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountingMode {
    /// Transmissions cost `e_tx`; every verification costs `s·e_den`.
    #[default]
    Mechanistic,
    /// Every handled fetch costs `e_tx + s·e_den`.
    PaperFigure,
}

/// Per-image energy prices and request size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub n_images: usize,
    /// Wh per transmitted image.
    pub e_tx: f64,
    /// Wh per denoising step.
    pub e_den: f64,
    pub mode: AccountingMode,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            n_images: 50,
            e_tx: 4.0,
            e_den: 0.05,
            mode: AccountingMode::Mechanistic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpectedCounts {
    pub fetches_per_image: f64,
    pub transmissions_per_image: f64,
}

fn check_probability(name: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("{v} not in [0,1]")))
    }
}

pub fn expected_counts(p: f64, d: f64, f: f64) -> Result<ExpectedCounts> {
    check_probability("p", p)?;
    check_probability("d", d)?;
    check_probability("f", f)?;
    let settle = (1.0 - p) * (1.0 - f);
    if settle <= 0.0 {
        return Err(Error::Divergence);
    }
    let fetches = 1.0 / settle;
    Ok(ExpectedCounts {
        fetches_per_image: fetches,
        transmissions_per_image: (settle + p * (1.0 - d)) * fetches,
    })
}

/// Expected total energy in Wh for delivering `cost.n_images` images.
pub fn expected_energy(cost: &CostModel, p: f64, d: f64, f: f64, s: usize) -> Result<f64> {
    if cost.e_tx < 0.0 || cost.e_den < 0.0 {
        return Err(Error::invalid("energy", "prices must be non-negative"));
    }
    let c = expected_counts(p, d, f)?;
    let s = s as f64;
    let per_image = match cost.mode {
        AccountingMode::Mechanistic => {
            c.fetches_per_image * s * cost.e_den + c.transmissions_per_image * cost.e_tx
        }
        AccountingMode::PaperFigure => c.fetches_per_image * (cost.e_tx + s * cost.e_den),
    };
    Ok(cost.n_images as f64 * per_image)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub detection: f64,
    pub false_positive: f64,
}

/// `(d(s), f(s))` for `s = 0..=s_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCurve {
    points: Vec<RatePoint>,
}

impl RateCurve {
    pub fn new(points: Vec<RatePoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyDomain);
        }
        for pt in &points {
            check_probability("detection", pt.detection)?;
            check_probability("false_positive", pt.false_positive)?;
        }
        Ok(RateCurve { points })
    }

    pub fn constant(detection: f64, false_positive: f64, s_max: usize) -> Result<Self> {
        RateCurve::new(vec![
            RatePoint {
                detection,
                false_positive,
            };
            s_max + 1
        ])
    }

    /// Requires estimates for `s = 0, 1, 2, ...` in order.
    pub fn from_estimates(estimates: &[RateEstimate]) -> Result<Self> {
        if let Some((i, e)) = estimates.iter().enumerate().find(|(i, e)| e.steps != *i) {
            return Err(Error::invalid(
                "estimates",
                format!(
                    "entry {i} is for s = {}, expected contiguous steps from 0",
                    e.steps
                ),
            ));
        }
        RateCurve::new(
            estimates
                .iter()
                .map(|e| RatePoint {
                    detection: e.detection_rate,
                    false_positive: e.false_positive_rate,
                })
                .collect(),
        )
    }

    pub fn s_max(&self) -> usize {
        self.points.len() - 1
    }

    pub fn get(&self, s: usize) -> Option<RatePoint> {
        self.points.get(s).copied()
    }

    pub fn points(&self) -> &[RatePoint] {
        &self.points
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepOptimum {
    pub steps: usize,
    pub energy: f64,
    /// Expected energy for every enumerated `s`, index = step count.
    pub energies: Vec<f64>,
}

/// Exact argmin of expected energy over `s ∈ 0..=s_max`; ties go to the
/// smaller step count.
pub fn optimal_steps(
    curve: &RateCurve,
    p: f64,
    cost: &CostModel,
    s_max: usize,
) -> Result<StepOptimum> {
    if s_max > curve.s_max() {
        return Err(Error::invalid(
            "s_max",
            format!("curve is only defined up to {}", curve.s_max()),
        ));
    }
    let energies = (0..=s_max)
        .map(|s| {
            let pt = curve.points[s];
            expected_energy(cost, p, pt.detection, pt.false_positive, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (s, e) in energies.iter().enumerate() {
        if *e < energies[best] {
            best = s;
        }
    }
    Ok(StepOptimum {
        steps: best,
        energy: energies[best],
        energies,
    })
}
