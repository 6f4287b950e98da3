//! The trainable velocity field `v(z, t)`.
//!
//! A SiLU MLP over `[z | time features]`, where the time features are
//! sinusoids at geometrically spaced frequencies. Parameters are named
//! `velocity.*`.

use serde::{Deserialize, Serialize};

use crate::diffengine::{Bindings, Graph, ParameterSet, Tensor, Var};
use crate::nn::{geometric_frequencies, sinusoidal_features, Activation, Mlp};
use crate::rng::{self, streams};
use crate::{Error, Result};

const MAX_TIME_FREQUENCY: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityLayout {
    pub dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_time_features")]
    pub time_features: usize,
}

fn default_hidden() -> usize {
    128
}

fn default_layers() -> usize {
    3
}

fn default_time_features() -> usize {
    16
}

impl VelocityLayout {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            hidden: default_hidden(),
            layers: default_layers(),
            time_features: default_time_features(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("velocity.dim must be at least 1"));
        }
        if self.hidden == 0 || self.layers == 0 {
            return Err(Error::config("velocity.hidden and velocity.layers must be positive"));
        }
        if self.time_features == 0 || self.time_features % 2 != 0 {
            return Err(Error::config("velocity.time_features must be a positive even number"));
        }
        Ok(())
    }

    fn mlp(&self) -> Mlp {
        let mut sizes = vec![self.dim + self.time_features];
        sizes.extend(std::iter::repeat(self.hidden).take(self.layers));
        sizes.push(self.dim);
        Mlp::new("velocity", sizes, Activation::Silu)
    }
}

/// Anything that can produce a velocity column block inside a graph.
/// Losses are written against this so tests can plug in oracle fields.
pub trait VelocityModel {
    /// Velocities for the rows of `z` (`B x n`) at times `ts`.
    fn velocity_graph(&self, g: &Graph, bindings: &Bindings, z: Var, ts: &[f64]) -> Result<Var>;

    /// Trainable parameters the graph form looks up, if any.
    fn parameters(&self) -> Option<&ParameterSet> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    layout: VelocityLayout,
    net: Mlp,
    frequencies: Vec<f64>,
    params: ParameterSet,
}

impl VelocityField {
    /// Default layout (3 x 128 SiLU, 16 time features) for `dim`-dimensional
    /// data.
    pub fn initialize(dim: usize, seed: u64) -> Result<Self> {
        Self::with_layout(VelocityLayout::new(dim), seed)
    }

    pub fn with_layout(layout: VelocityLayout, seed: u64) -> Result<Self> {
        layout.validate()?;
        let net = layout.mlp();
        let params = net.init_params(&mut rng::stream(seed, streams::INIT_VELOCITY));
        Ok(Self {
            frequencies: geometric_frequencies(layout.time_features / 2, MAX_TIME_FREQUENCY),
            layout,
            net,
            params,
        })
    }

    pub fn from_params(layout: VelocityLayout, params: ParameterSet) -> Result<Self> {
        let mut v = Self::with_layout(layout, 0)?;
        v.set_params(params)?;
        Ok(v)
    }

    pub fn layout(&self) -> &VelocityLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn set_params(&mut self, params: ParameterSet) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::config("velocity parameter layout mismatch"));
        }
        self.params = params;
        Ok(())
    }

    /// Input width of the first layer: data dimension plus time features.
    pub fn first_layer_fan_in(&self) -> usize {
        self.net.sizes()[0]
    }

    fn check_inputs(&self, z: &Tensor, ts: &[f64]) -> Result<()> {
        if z.cols() != self.layout.dim || z.rows() != ts.len() {
            return Err(Error::shape(format!(
                "velocity input {}x{} with {} times, expected width {}",
                z.rows(),
                z.cols(),
                ts.len(),
                self.layout.dim
            )));
        }
        if !z.is_finite() {
            return Err(Error::NonFiniteInput("velocity state".into()));
        }
        if let Some(&t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain { t });
        }
        Ok(())
    }

    /// Batched forward pass, one row per point.
    pub fn forward_batch(&self, z: &Tensor, ts: &[f64]) -> Result<Tensor> {
        self.check_inputs(z, ts)?;
        let g = Graph::new();
        let b = g.bind_constant(&self.params);
        let zv = g.constant(z.clone());
        let out = self.velocity_graph(&g, &b, zv, ts)?;
        g.check()?;
        Ok(g.value(out))
    }

    pub fn forward(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        let z = Tensor::new(1, z.len(), z.to_vec());
        Ok(self.forward_batch(&z, &[t])?.into_data())
    }
}

impl VelocityModel for VelocityField {
    fn velocity_graph(&self, g: &Graph, bindings: &Bindings, z: Var, ts: &[f64]) -> Result<Var> {
        let features = g.constant(sinusoidal_features(ts, &self.frequencies));
        Ok(self.net.forward(g, bindings, g.concat_cols(z, features))?)
    }

    fn parameters(&self) -> Option<&ParameterSet> {
        Some(&self.params)
    }
}
