//! Subcommand bodies. Each returns the one-line summary printed on success.

use diffshield::analytic::{self, RateCurve};
use diffshield::exec::Exec;
use diffshield::optimizers::{self, BanditEnv};
use diffshield::protocol;
use diffshield::{RateCache, VerifierBackend};
use serde::Serialize;

use crate::config::Method;
use crate::output::{write_csv, write_json};
use crate::{CliError, RunConfig};

const EXEC: Exec = Exec::Parallel;

pub fn simulate(config: &RunConfig) -> Result<String, CliError> {
    let sc = &config.scenario;
    let runs = protocol::simulate_batch(sc, config.simulate.episodes, EXEC)?;
    let rows: Vec<_> = runs
        .iter()
        .enumerate()
        .flat_map(|(i, r)| protocol::episode_rows(sc, i, r))
        .collect();
    let path = write_csv(config, "episodes.csv", &rows)?;
    let s = protocol::summarize(&runs);
    Ok(format!(
        "simulate: {} episodes at s={}, E_total {:.3} Wh (se {:.3}), {:.2} retransmissions per episode -> {}",
        s.episodes,
        sc.s,
        s.e_total.mean,
        s.e_total.se,
        s.retransmissions.mean,
        path.display()
    ))
}

#[derive(Serialize)]
struct SweepRow {
    s: usize,
    #[serde(rename = "E_analytic")]
    e_analytic: f64,
    #[serde(rename = "E_monte_carlo")]
    e_monte_carlo: f64,
    stderr: f64,
}

/// Rates at each step: the fixed pair for the parametric backend, kernel
/// estimates otherwise.
fn rates_at(
    config: &RunConfig,
    steps: &[usize],
    trials: usize,
) -> Result<Vec<(f64, f64)>, CliError> {
    match config.scenario.verifier_backend {
        VerifierBackend::Parametric {
            detection,
            false_positive,
        } => Ok(vec![(detection, false_positive); steps.len()]),
        VerifierBackend::Kernel => {
            let mut cache = RateCache::new(config.scenario.kernel.clone(), config.scenario.attack);
            let est = cache.curve(steps, trials, config.seed, EXEC)?;
            Ok(est
                .iter()
                .map(|e| (e.detection_rate, e.false_positive_rate))
                .collect())
        }
    }
}

pub fn sweep(config: &RunConfig) -> Result<String, CliError> {
    let steps = config.sweep.range().steps();
    let rates = rates_at(config, &steps, config.sweep.rate_trials)?;
    let cost = config.scenario.cost_model();
    let mut rows = Vec::with_capacity(steps.len());
    for (&s, &(d, f)) in steps.iter().zip(&rates) {
        let sc = diffshield::ScenarioConfig {
            s,
            ..config.scenario.clone()
        };
        let mc = protocol::summarize(&protocol::simulate_batch(&sc, config.sweep.episodes, EXEC)?);
        rows.push(SweepRow {
            s,
            e_analytic: analytic::expected_energy(&cost, config.scenario.poison_prob, d, f, s)?,
            e_monte_carlo: mc.e_total.mean,
            stderr: mc.e_total.se,
        });
    }
    let best = rows.iter().fold(
        &rows[0],
        |b, r| if r.e_analytic < b.e_analytic { r } else { b },
    );
    let path = write_csv(config, "sweep.csv", &rows)?;
    Ok(format!(
        "sweep: {} step counts, analytic minimum {:.3} Wh at s={} -> {}",
        rows.len(),
        best.e_analytic,
        best.s,
        path.display()
    ))
}

#[derive(Serialize)]
struct RateRow {
    s: usize,
    d: f64,
    d_se: f64,
    f: f64,
    f_se: f64,
    trials: usize,
}

pub fn curve(config: &RunConfig) -> Result<String, CliError> {
    let steps = config.curve.range().steps();
    let mut cache = RateCache::new(config.scenario.kernel.clone(), config.scenario.attack);
    let est = cache.curve(&steps, config.curve.trials, config.seed, EXEC)?;
    let rows: Vec<RateRow> = est
        .iter()
        .map(|e| RateRow {
            s: e.steps,
            d: e.detection_rate,
            d_se: e.detection_se,
            f: e.false_positive_rate,
            f_se: e.false_positive_se,
            trials: e.trials,
        })
        .collect();
    let peak = rows
        .iter()
        .fold(&rows[0], |b, r| if r.d > b.d { r } else { b });
    let path = write_csv(config, "rates.csv", &rows)?;
    Ok(format!(
        "curve: {} step counts x {} trials, peak detection {:.4} at s={} -> {}",
        rows.len(),
        config.curve.trials,
        peak.d,
        peak.s,
        path.display()
    ))
}

#[derive(Serialize)]
struct TrainRow {
    iteration: usize,
    #[serde(rename = "mean_energy_Wh")]
    mean_energy_wh: f64,
    stderr: f64,
}

pub fn train(config: &RunConfig) -> Result<String, CliError> {
    let s_max = config.bandit.s_max;
    let curve = match config.scenario.verifier_backend {
        VerifierBackend::Parametric {
            detection,
            false_positive,
        } => RateCurve::constant(detection, false_positive, s_max)?,
        VerifierBackend::Kernel => {
            let mut cache = RateCache::new(config.scenario.kernel.clone(), config.scenario.attack);
            cache.rate_curve(s_max, config.bandit.rate_trials, config.seed, EXEC)?
        }
    };
    let env = BanditEnv::from_curve(config.scenario.clone(), curve, s_max)?;
    let tc = &config.train;
    let (curve, best) = match config.bandit.method {
        Method::Ppo => {
            let t = optimizers::train_ppo(&env, tc, EXEC)?;
            (t.curve, Some(t.policy.best_arm()))
        }
        Method::Diffusion => {
            let t = optimizers::train_diffusion_policy(&env, tc, EXEC)?;
            (t.curve, Some(t.policy.best_arm()))
        }
        Method::Random => (
            optimizers::run_random(&env, tc.iterations, tc.batch, tc.seed, EXEC)?,
            None,
        ),
    };
    let rows: Vec<TrainRow> = curve
        .points
        .iter()
        .map(|p| TrainRow {
            iteration: p.iteration,
            mean_energy_wh: p.mean_energy,
            stderr: p.stderr,
        })
        .collect();
    let path = write_csv(config, "training_curve.csv", &rows)?;
    let window = curve.len().min(100);
    let (mean, se) = curve.final_window(window);
    let policy = best.map_or(String::new(), |s| format!(", policy mode s={s}"));
    let method = match config.bandit.method {
        Method::Ppo => "ppo",
        Method::Diffusion => "diffusion",
        Method::Random => "random",
    };
    Ok(format!(
        "train {method}: final-{window} mean {mean:.3} Wh (se {se:.3}){policy} -> {}",
        path.display()
    ))
}

pub fn reproduce_paper(config: &RunConfig) -> Result<String, CliError> {
    let report = protocol::reproduce_paper();
    let path = write_json(config, "paper_report.json", &report)?;
    let totals: Vec<String> = report
        .scenarios
        .iter()
        .map(|s| format!("{:.1}", s.energy_wh))
        .collect();
    Ok(format!(
        "reproduce-paper: {} Wh, reduction {:.3}% (stated {}%) -> {}",
        totals.join(" / "),
        report.reduction_pct,
        report.stated_reduction_pct,
        path.display()
    ))
}
