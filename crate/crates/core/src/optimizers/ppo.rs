//! Categorical policy over arms, one logit per arm, trained with the
//! clipped surrogate objective.

use super::{
    check_finite, normalized_advantages, sample_categorical, softmax, Adam, BanditEnv,
    PolicyParams, Trained, TrainingCurve,
};
use crate::error::Result;
use crate::exec::Exec;
use crate::seed::{self, Stream};

/// Gradient of the clipped surrogate `mean_i min(ρ_i A_i, clip(ρ_i) A_i)`
/// with respect to the logits. A sample contributes only while its ratio is
/// inside the clip range in the direction its advantage pushes.
fn surrogate_logit_grad(
    probs: &[f64],
    old: &[f64],
    actions: &[usize],
    adv: &[f64],
    clip: f64,
) -> Vec<f64> {
    let mut g = vec![0.0; probs.len()];
    let b = actions.len() as f64;
    for (&a, &adv) in actions.iter().zip(adv) {
        let ratio = probs[a] / old[a];
        let clipped = (adv > 0.0 && ratio > 1.0 + clip) || (adv < 0.0 && ratio < 1.0 - clip);
        if clipped || adv == 0.0 {
            continue;
        }
        let w = adv * ratio / b;
        for (k, (gk, pk)) in g.iter_mut().zip(probs).enumerate() {
            *gk += w * ((k == a) as u8 as f64 - pk);
        }
    }
    g
}

pub fn train_ppo(env: &BanditEnv, config: &super::TrainConfig, exec: Exec) -> Result<Trained> {
    config.validate()?;
    let mut logits = vec![0.0; env.n_arms()];
    let mut opt = Adam::new(logits.len(), config.learning_rate);
    let mut curve = TrainingCurve::default();

    for it in 0..config.iterations {
        let old = softmax(&logits);
        check_finite(it, "policy", &old)?;
        let mut rng = seed::rng_for(config.seed, Stream::PolicySample, it as u64);
        let actions: Vec<usize> = (0..config.batch)
            .map(|_| sample_categorical(&old, &mut rng))
            .collect();
        let energies = env.rollouts(&actions, config.seed, (it * config.batch) as u64, exec)?;
        curve.push(it, &energies);
        let adv = normalized_advantages(&energies);
        check_finite(it, "advantage", &adv)?;

        for _ in 0..config.epochs {
            let probs = softmax(&logits);
            let descent: Vec<f64> =
                surrogate_logit_grad(&probs, &old, &actions, &adv, config.clip_ratio)
                    .into_iter()
                    .map(|g| -g)
                    .collect();
            check_finite(it, "gradient", &descent)?;
            opt.step(&mut logits, &descent);
        }
    }

    let probabilities = softmax(&logits);
    check_finite(config.iterations, "policy", &probabilities)?;
    Ok(Trained {
        policy: PolicyParams {
            latent: logits,
            refinement: None,
            probabilities,
        },
        curve,
    })
}
