//! Dense multilayer perceptrons on top of the [`Graph`] engine.

use rand::Rng;

use crate::diffengine::{Bindings, DiffError, Graph, ParameterSet, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Silu,
}

/// Layer widths plus a name prefix; the weights themselves live in a
/// [`ParameterSet`] under `{prefix}.l{k}.w` (`in x out`) and `{prefix}.l{k}.b`
/// (`1 x out`).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    prefix: String,
    sizes: Vec<usize>,
    activation: Activation,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, sizes: Vec<usize>, activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        Self { prefix: prefix.into(), sizes, activation }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.b", self.prefix)
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParameterSet {
        let mut params = ParameterSet::new();
        for l in 0..self.layer_count() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)).collect();
            params
                .insert(self.weight_name(l), Tensor::new(fan_in, fan_out, w))
                .expect("fresh names");
            params
                .insert(self.bias_name(l), Tensor::zeros(1, fan_out))
                .expect("fresh names");
        }
        params
    }

    /// Affine layers with the activation between them; the output layer is
    /// linear.
    pub fn forward(&self, g: &Graph, params: &Bindings, x: Var) -> Result<Var, DiffError> {
        let mut h = x;
        for l in 0..self.layer_count() {
            h = g.affine(h, params.get(&self.weight_name(l))?, params.get(&self.bias_name(l))?);
            if l + 1 < self.layer_count() {
                h = match self.activation {
                    Activation::Tanh => g.tanh(h),
                    Activation::Silu => g.silu(h),
                };
            }
        }
        Ok(h)
    }
}

/// `[sin(w_k t), cos(w_k t)]` for each frequency, one row per time.
pub fn sinusoidal_features(ts: &[f64], frequencies: &[f64]) -> Tensor {
    let cols = 2 * frequencies.len();
    let mut data = Vec::with_capacity(ts.len() * cols);
    for &t in ts {
        for &w in frequencies {
            data.push((w * t).sin());
        }
        for &w in frequencies {
            data.push((w * t).cos());
        }
    }
    Tensor::new(ts.len(), cols, data)
}

/// `count` frequencies spaced geometrically from 1 to `max`.
pub fn geometric_frequencies(count: usize, max: f64) -> Vec<f64> {
    if count == 1 {
        return vec![1.0];
    }
    (0..count)
        .map(|k| max.powf(k as f64 / (count - 1) as f64))
        .collect()
}
