//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits non-zero if any failed.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use diffshield::analytic::{self, AccountingMode};
use diffshield::diffusion::{Component, FeatureVector, GaussianMixture};
use diffshield::exec::Exec;
use diffshield::optimizers::{self, BanditEnv, Mlp, TrainConfig};
use diffshield::protocol::{self, ScenarioConfig};
use diffshield::seed;
use diffshield::threat::AttackParams;
use diffshield::{DiffusionKernel, RateCache};
use rand::Rng;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_diffshield");

fn run_bin(args: &[&str]) -> (i32, String) {
    let out = Command::new(BIN).args(args).output().expect("binary runs");
    let text =
        String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn within(elapsed: Duration, limit_s: f64) {
    assert!(
        elapsed.as_secs_f64() < limit_s,
        "took {:.2} s, limit {limit_s} s",
        elapsed.as_secs_f64()
    );
}

fn read_report(dir: &Path) -> Value {
    let text = std::fs::read_to_string(dir.join("paper_report.json")).unwrap();
    serde_json::from_str::<Value>(&text).unwrap()["report"].clone()
}

fn reported_totals() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let (code, log) = run_bin(&["reproduce-paper", "--out", dir.path().to_str().unwrap()]);
    within(start.elapsed(), 1.0);
    assert_eq!(code, 0, "{log}");
    let r = read_report(dir.path());
    let scenarios = r["scenarios"].as_array().unwrap();
    for (sc, (handled, want)) in scenarios
        .iter()
        .zip([(83, 332.0), (56, 305.2), (56, 358.4)])
    {
        assert_eq!(sc["handled_events"].as_u64().unwrap(), handled);
        let e = sc["energy_wh"].as_f64().unwrap();
        assert!((e - want).abs() < 1e-9, "{e} vs {want}");
    }
    let reduction = r["reduction_pct"].as_f64().unwrap();
    assert!((reduction - 100.0 * (332.0 - 305.2) / 332.0).abs() < 1e-9);
    assert!((reduction - 8.072).abs() < 5e-4, "{reduction}");
    assert_eq!(r["stated_reduction_pct"].as_f64().unwrap(), 8.7);
    let notes = r["discrepancies"].as_array().unwrap();
    assert!(notes.iter().any(|d| {
        let d = d.as_str().unwrap();
        d.contains("8.072") && d.contains("8.7")
    }));
}

fn retransmission_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (code, log) = run_bin(&["reproduce-paper", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0, "{log}");
    let r = read_report(dir.path());
    let sc = r["scenarios"].as_array().unwrap();
    assert_eq!(sc[0]["steps"].as_u64(), Some(0));
    assert_eq!(sc[0]["retransmissions_total"].as_u64(), Some(33));
    assert_eq!(sc[1]["steps"].as_u64(), Some(29));
    assert_eq!(sc[1]["retransmissions_total"].as_u64(), Some(6));
    assert_eq!(r["stated_undefended_retransmissions"].as_u64(), Some(32));
    let notes = r["discrepancies"].as_array().unwrap();
    assert!(notes.iter().any(|d| {
        let d = d.as_str().unwrap();
        d.contains("33") && d.contains("32")
    }));
}

fn analytic_agreement() {
    let start = Instant::now();
    let grid = [
        (0.0, 0.0, 0.0, 0),
        (0.1, 0.5, 0.05, 3),
        (0.3, 0.0, 0.0, 0),
        (0.3, 0.7, 0.0, 5),
        (0.3, 0.7, 0.2, 10),
        (0.3, 1.0, 0.0, 29),
        (0.5, 0.4, 0.1, 8),
        (0.5, 0.9, 0.3, 48),
        (0.2, 0.2, 0.5, 15),
        (0.7, 0.8, 0.1, 20),
        (0.05, 0.99, 0.01, 50),
        (0.4, 0.6, 0.4, 2),
    ];
    for mode in [AccountingMode::Mechanistic, AccountingMode::PaperFigure] {
        for (i, &(p, d, f, s)) in grid.iter().enumerate() {
            let config = ScenarioConfig {
                poison_prob: p,
                s,
                seed: 100 + i as u64,
                accounting_mode: mode,
                ..ScenarioConfig::parametric(d, f)
            };
            let sum = protocol::summarize(
                &protocol::simulate_batch(&config, 10_000, Exec::Parallel).unwrap(),
            );
            let e = analytic::expected_energy(&config.cost_model(), p, d, f, s).unwrap();
            let gap = (sum.e_total.mean - e).abs();
            assert!(
                gap < 3.0 * sum.e_total.se || gap < 1e-9,
                "{mode:?} {:?}: {} ± {} vs {e}",
                (p, d, f, s),
                sum.e_total.mean,
                sum.e_total.se
            );
        }
    }
    within(start.elapsed(), 30.0);
}

fn score_check() {
    let start = Instant::now();
    let mut rng = seed::rng(2024);
    let mut worst: f64 = 0.0;
    for m in 0..5 {
        let k = 2 + m % 3;
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut comps: Vec<Component> = raw
            .iter()
            .map(|w| Component {
                weight: w / total,
                mean: (0..3).map(|_| rng.random_range(-2.0..2.0)).collect(),
                variance: rng.random_range(0.3..2.0),
            })
            .collect();
        let rest: f64 = comps[1..].iter().map(|c| c.weight).sum();
        comps[0].weight = 1.0 - rest;
        let gmm = GaussianMixture::new(comps).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let score = gmm.score(&FeatureVector(x.clone())).unwrap();
            let h = 1e-5;
            let fd: Vec<f64> = (0..3)
                .map(|i| {
                    let (mut up, mut down) = (x.clone(), x.clone());
                    up[i] += h;
                    down[i] -= h;
                    (gmm.log_density(&FeatureVector(up)).unwrap()
                        - gmm.log_density(&FeatureVector(down)).unwrap())
                        / (2.0 * h)
                })
                .collect();
            let diff = score
                .0
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = fd.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-3);
            worst = worst.max(diff / scale);
        }
    }
    assert!(worst < 1e-5, "max relative error {worst}");
    within(start.elapsed(), 1.0);
}

fn purification_effect() {
    let start = Instant::now();
    let base = ScenarioConfig::default();
    let mut cache = RateCache::new(DiffusionKernel::default(), AttackParams::default());
    let curve = cache.rate_curve(50, 1000, 1, Exec::Parallel).unwrap();
    let s_star = analytic::optimal_steps(&curve, base.poison_prob, &base.cost_model(), 50)
        .unwrap()
        .steps;
    assert!(s_star > 0);

    let mut fresh = RateCache::new(DiffusionKernel::default(), AttackParams::default());
    let est = fresh
        .curve(&[0, s_star, 50], 4000, 21, Exec::Parallel)
        .unwrap();
    let (zero, mid, full) = (est[0], est[1], est[2]);
    let gain_se = (zero.detection_se.powi(2) + mid.detection_se.powi(2)).sqrt();
    assert!(
        mid.detection_rate - zero.detection_rate - 3.0 * gain_se >= 0.3,
        "d(0) = {}, d({s_star}) = {}",
        zero.detection_rate,
        mid.detection_rate
    );
    assert!(
        full.detection_rate < mid.detection_rate,
        "d(50) = {} vs d({s_star}) = {}",
        full.detection_rate,
        mid.detection_rate
    );
    within(start.elapsed(), 60.0);
}

fn optimizer_convergence() {
    let start = Instant::now();
    let mut cache = RateCache::new(DiffusionKernel::default(), AttackParams::default());
    let curve = cache.rate_curve(50, 1000, 1, Exec::Parallel).unwrap();
    let env = BanditEnv::from_curve(ScenarioConfig::default(), curve, 50).unwrap();
    let oracle = optimizers::exhaustive_search(&env, 200, 7, Exec::Parallel)
        .unwrap()
        .best_stats();
    let (r_mean, r_se) = optimizers::run_random(&env, 500, 32, 3, Exec::Parallel)
        .unwrap()
        .final_window(100);
    let config = TrainConfig::default();
    let trained = [
        (
            "ppo",
            optimizers::train_ppo(&env, &config, Exec::Parallel).unwrap(),
        ),
        (
            "diffusion",
            optimizers::train_diffusion_policy(&env, &config, Exec::Parallel).unwrap(),
        ),
    ];
    for (name, t) in &trained {
        let (mean, se) = t.curve.final_window(100);
        let rel = (mean - oracle.mean_energy).abs() / oracle.mean_energy;
        assert!(
            rel <= 0.02,
            "{name}: {mean} vs oracle {} ({:.2}%)",
            oracle.mean_energy,
            100.0 * rel
        );
        assert!(
            oracle.mean_energy - 3.0 * oracle.stderr <= mean + 3.0 * se,
            "{name} beats the oracle"
        );
        let sep = (se * se + r_se * r_se).sqrt();
        assert!(
            r_mean - mean >= 3.0 * sep,
            "{name}: {mean} vs random {r_mean}"
        );
    }

    let bandit = BanditEnv::fixed(
        (0..51)
            .map(|s| 200.0 + 4.0 * (s as f64 - 17.0).abs())
            .collect(),
    )
    .unwrap();
    let ppo = optimizers::train_ppo(&bandit, &config, Exec::Parallel).unwrap();
    let dp = optimizers::train_diffusion_policy(&bandit, &config, Exec::Parallel).unwrap();
    assert!(
        ppo.policy.probabilities[17] >= 0.9,
        "ppo mass {}",
        ppo.policy.probabilities[17]
    );
    assert!(
        dp.policy.probabilities[17] >= 0.9,
        "diffusion mass {}",
        dp.policy.probabilities[17]
    );
    within(start.elapsed(), 300.0);
}

fn gradient_gate() {
    let start = Instant::now();
    let mut rng = seed::rng(99);
    for _ in 0..10 {
        let depth = rng.random_range(1..4);
        let mut sizes = vec![rng.random_range(1..7)];
        for _ in 0..depth {
            sizes.push(rng.random_range(2..9));
        }
        sizes.push(rng.random_range(1..6));
        let net = Mlp::new(&sizes, &mut rng).unwrap();
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let err = optimizers::mlp_grad_check(&net, &x, &mut rng).unwrap();
        assert!(err < 1e-4, "{sizes:?}: {err}");
    }
    within(start.elapsed(), 5.0);
}

const SMALL_RUN: &str = r#"
seed = 11

[simulate]
episodes = 20

[sweep]
s_min = 0
s_max = 6
episodes = 10
rate_trials = 100

[curve]
s_min = 0
s_max = 8
trials = 150

[bandit]
method = "diffusion"
s_max = 12
rate_trials = 100

[train]
iterations = 30
batch = 16
"#;

fn determinism() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("run.toml");
    std::fs::write(&cfg, SMALL_RUN).unwrap();
    let cfg = cfg.to_str().unwrap();
    let cases = [
        ("simulate", "episodes.csv"),
        ("sweep", "sweep.csv"),
        ("curve", "rates.csv"),
        ("train", "training_curve.csv"),
        ("reproduce-paper", "paper_report.json"),
    ];
    for (cmd, file) in cases {
        let mut outputs = Vec::new();
        for (k, jobs) in ["1", "1", "3"].iter().enumerate() {
            let out = root.path().join(format!("{cmd}-{k}"));
            let (code, log) = run_bin(&[
                cmd,
                "--config",
                cfg,
                "--jobs",
                jobs,
                "--out",
                out.to_str().unwrap(),
            ]);
            assert_eq!(code, 0, "{cmd}: {log}");
            outputs.push(std::fs::read(out.join(file)).unwrap());
        }
        assert!(outputs[0] == outputs[1], "{cmd}: repeat differs");
        assert!(outputs[0] == outputs[2], "{cmd}: --jobs changes output");
        let text = String::from_utf8(outputs[0].clone()).unwrap();
        assert!(text.contains("11"), "{cmd}: seed missing");
    }
}

fn conservation() {
    let mut rng = seed::rng(4242);
    for i in 0..10_000u64 {
        let d = rng.random_range(0.0..=1.0);
        let f = rng.random_range(0.0..0.6);
        let config = ScenarioConfig {
            n_images: rng.random_range(1..80),
            poison_prob: rng.random_range(0.0..0.8),
            s: rng.random_range(0..=50),
            e_tx: rng.random_range(0.0..10.0),
            e_den: rng.random_range(0.0..0.5),
            max_rounds: 500,
            accounting_mode: if rng.random_bool(0.5) {
                AccountingMode::PaperFigure
            } else {
                AccountingMode::Mechanistic
            },
            ..ScenarioConfig::parametric(d, f)
        };
        let r = protocol::simulate_episode(&config, &mut seed::rng(i)).unwrap();
        let l = r.ledger;
        assert_eq!(l.e_total_wh, l.e_tx_wh + l.e_verify_wh, "episode {i}");
        assert_eq!(r.trace.delivered, config.n_images);

        let perfect = ScenarioConfig {
            verifier_backend: ScenarioConfig::parametric(1.0, 0.0).verifier_backend,
            ..config
        };
        let r = protocol::simulate_episode(&perfect, &mut seed::rng(i)).unwrap();
        assert_eq!(r.trace.total_retransmissions(), 0, "episode {i}");
        assert_eq!(r.ledger.e_total_wh, r.ledger.e_tx_wh + r.ledger.e_verify_wh);
    }
    // the kernel backend shares the same ledger
    for i in 0..50u64 {
        let config = ScenarioConfig {
            n_images: 10,
            s: (i % 12) as usize,
            seed: i,
            ..ScenarioConfig::default()
        };
        let r = protocol::simulate_episode(&config, &mut seed::rng(i)).unwrap();
        assert_eq!(r.ledger.e_total_wh, r.ledger.e_tx_wh + r.ledger.e_verify_wh);
    }
}

fn main() {
    let criteria: [(&str, fn()); 9] = [
        ("reported-total reconstruction", reported_totals),
        ("retransmission headline", retransmission_counts),
        ("analytic-simulation agreement", analytic_agreement),
        ("score correctness", score_check),
        ("purification effect", purification_effect),
        ("optimizer convergence", optimizer_convergence),
        ("gradient gate", gradient_gate),
        ("determinism", determinism),
        ("conservation audit", conservation),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(()) => println!("PASS  {}. {name} ({secs:.2} s)", i + 1),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL  {}. {name} ({secs:.2} s): {msg}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
