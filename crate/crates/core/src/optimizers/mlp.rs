//! A small tanh multilayer perceptron with hand-written backprop, and Adam.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};

/// Fully connected network; hidden layers use `tanh`, the output is linear.
///
/// Parameters live in one flat vector, layer by layer, each layer stored as
/// its row-major weight matrix (`out × in`) followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations of every layer from one forward pass, input first.
#[derive(Debug, Clone)]
pub struct Forward {
    activations: Vec<Vec<f64>>,
}

impl Forward {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("at least input and output")
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    /// Weights drawn `N(0, 1/fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(
                "sizes",
                format!("{sizes:?}: need >= 2 non-empty layers"),
            ));
        }
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let std = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] {
                params.push(std * rng.sample::<f64, _>(StandardNormal));
            }
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(
                "sizes",
                format!("{sizes:?}: need >= 2 non-empty layers"),
            ));
        }
        if params.len() != param_count(sizes) {
            return Err(Error::DimensionMismatch {
                expected: param_count(sizes),
                found: params.len(),
            });
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Multiplies the output layer's weights and bias by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let n = self.sizes.len();
        let last = self.sizes[n - 2] * self.sizes[n - 1] + self.sizes[n - 1];
        let len = self.params.len();
        for p in &mut self.params[len - last..] {
            *p *= factor;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Forward {
        assert_eq!(x.len(), self.input_dim(), "input dimension");
        let n_layers = self.sizes.len() - 1;
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(x.to_vec());
        let mut offset = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let bias = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let a = &activations[l];
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    bias[o] + row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>()
                })
                .collect();
            let out = if l + 1 < n_layers {
                z.into_iter().map(f64::tanh).collect()
            } else {
                z
            };
            activations.push(out);
        }
        Forward { activations }
    }

    /// Gradients of a scalar loss with respect to every parameter and to the
    /// input, given `grad_out = ∂loss/∂output`.
    pub fn backward(&self, fw: &Forward, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(
            grad_out.len(),
            self.output_dim(),
            "output gradient dimension"
        );
        let n_layers = self.sizes.len() - 1;
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = grad_out.to_vec();
        let mut offset = self.params.len();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            offset -= n_in * n_out + n_out;
            if l + 1 < n_layers {
                for (d, a) in delta.iter_mut().zip(&fw.activations[l + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            let a_in = &fw.activations[l];
            let weights = &self.params[offset..offset + n_in * n_out];
            let (gw, gb) = grads[offset..offset + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            let mut grad_in = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                gb[o] = d;
                let row = &weights[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    gw[o * n_in + i] = d * a_in[i];
                    grad_in[i] += d * row[i];
                }
            }
            delta = grad_in;
        }
        (grads, delta)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Descends along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Backprop vs central differences for the loss `c · net(x)` with random
/// `c`, over every parameter. Returns the max relative error.
pub fn mlp_grad_check<R: Rng + ?Sized>(net: &Mlp, input: &[f64], rng: &mut R) -> Result<f64> {
    if net.sizes().len() < 3 {
        return Err(Error::invalid(
            "sizes",
            "gradient check needs at least one hidden layer",
        ));
    }
    if input.len() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: net.input_dim(),
            found: input.len(),
        });
    }
    let c: Vec<f64> = (0..net.output_dim())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let loss = |m: &Mlp| -> f64 {
        m.forward(input)
            .output()
            .iter()
            .zip(&c)
            .map(|(o, ci)| o * ci)
            .sum()
    };
    let (analytic, _) = net.backward(&net.forward(input), &c);

    let h = 1e-5;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (i, g) in analytic.iter().enumerate() {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let up = loss(&probe);
        probe.params[i] = orig - h;
        let down = loss(&probe);
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (g - numeric).abs() / (g.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
