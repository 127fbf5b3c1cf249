//! A denoising-chain policy head.
//!
//! A simplified stand-in for diffusion-model-generated decisions, not a
//! reproduction of any published architecture. A learned latent `z₀` is
//! refined `K` times by one residual network conditioned on the chain
//! position,
//!
//! ```text
//! z_k = z_{k-1} + g_θ([z_{k-1}, k/K])     k = 1..K
//! ```
//!
//! and `z_K` are the action logits. Both `z₀` and `θ` are trained by
//! REINFORCE with a standardized batch baseline, differentiating through the
//! whole chain. With identity refinement (`g ≡ 0`) this is plain categorical
//! policy gradient on `z₀`.

use super::{
    check_finite, normalized_advantages, sample_categorical, softmax, Adam, BanditEnv, Forward,
    Mlp, PolicyParams, TrainConfig, Trained, TrainingCurve,
};
use crate::error::Result;
use crate::exec::Exec;
use crate::seed::{self, Stream};

/// Weight of each refinement increment.
fn step_scale(k: usize, hidden: usize) -> f64 {
    1.0 / (k as f64 * (hidden as f64).sqrt())
}

struct Chain {
    steps: Vec<Forward>,
    logits: Vec<f64>,
}

fn run_chain(net: &Mlp, latent: &[f64], k: usize, identity: bool) -> Chain {
    let c = step_scale(k, net.sizes()[1]);
    let mut z = latent.to_vec();
    let mut steps = Vec::new();
    if !identity {
        for step in 1..=k {
            let mut input = z.clone();
            input.push(step as f64 / k as f64);
            let fw = net.forward(&input);
            for (zi, gi) in z.iter_mut().zip(fw.output()) {
                *zi += c * gi;
            }
            steps.push(fw);
        }
    }
    Chain { steps, logits: z }
}

/// Pulls `∂loss/∂z_K` back through the chain; returns the gradients for the
/// network parameters and for `z₀`.
fn chain_backward(net: &Mlp, chain: &Chain, grad_logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = grad_logits.len();
    let c = step_scale(chain.steps.len().max(1), net.sizes()[1]);
    let mut gz = grad_logits.to_vec();
    let mut gnet = vec![0.0; net.params().len()];
    for fw in chain.steps.iter().rev() {
        let scaled: Vec<f64> = gz.iter().map(|g| c * g).collect();
        let (gp, gin) = net.backward(fw, &scaled);
        for (acc, g) in gnet.iter_mut().zip(&gp) {
            *acc += g;
        }
        for (g, gi) in gz.iter_mut().zip(&gin[..n]) {
            *g += gi;
        }
    }
    (gnet, gz)
}

pub fn train_diffusion_policy(
    env: &BanditEnv,
    config: &TrainConfig,
    exec: Exec,
) -> Result<Trained> {
    config.validate()?;
    let n = env.n_arms();
    let k = config.chain_length;
    let mut net = Mlp::new(
        &[n + 1, config.hidden, n],
        &mut seed::rng_for(config.seed, Stream::Init, 1),
    )?;
    net.scale_output_layer(0.1);

    // Latent first, network after; one optimizer over both.
    let mut params = vec![0.0; n];
    params.extend_from_slice(net.params());
    let mut opt = Adam::new(params.len(), config.learning_rate);
    let mut curve = TrainingCurve::default();

    for it in 0..config.iterations {
        let chain = run_chain(&net, &params[..n], k, config.identity_refinement);
        let probs = softmax(&chain.logits);
        check_finite(it, "policy", &probs)?;
        let mut rng = seed::rng_for(config.seed, Stream::PolicySample, it as u64);
        let actions: Vec<usize> = (0..config.batch)
            .map(|_| sample_categorical(&probs, &mut rng))
            .collect();
        let energies = env.rollouts(&actions, config.seed, (it * config.batch) as u64, exec)?;
        curve.push(it, &energies);
        let adv = normalized_advantages(&energies);
        check_finite(it, "advantage", &adv)?;

        // descent direction on -mean(A · log π(a))
        let b = config.batch as f64;
        let mut gz = vec![0.0; n];
        for (&a, &ad) in actions.iter().zip(&adv) {
            for (j, (g, p)) in gz.iter_mut().zip(&probs).enumerate() {
                *g -= ad * ((j == a) as u8 as f64 - p) / b;
            }
        }
        let (gnet, glatent) = chain_backward(&net, &chain, &gz);
        let mut grad = glatent;
        grad.extend(gnet);
        check_finite(it, "gradient", &grad)?;
        opt.step(&mut params, &grad);
        net.params_mut().copy_from_slice(&params[n..]);
    }

    let chain = run_chain(&net, &params[..n], k, config.identity_refinement);
    let probabilities = softmax(&chain.logits);
    check_finite(config.iterations, "policy", &probabilities)?;
    Ok(Trained {
        policy: PolicyParams {
            latent: params[..n].to_vec(),
            refinement: (!config.identity_refinement).then_some(net),
            probabilities,
        },
        curve,
    })
}
