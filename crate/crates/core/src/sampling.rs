//! Reverse-time integration from noise at `t = 1` to data at `t = 0`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::sample_noise;
use crate::diffengine::Tensor;
use crate::velocity_model::VelocityField;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    Euler,
    Heun,
}

impl FromStr for SolverMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SolverMethod::Euler),
            "heun" => Ok(SolverMethod::Heun),
            other => Err(Error::config(format!("unknown solver method `{other}` (expected euler or heun)"))),
        }
    }
}

impl fmt::Display for SolverMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverMethod::Euler => "euler",
            SolverMethod::Heun => "heun",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { method: SolverMethod::Heun, steps: 50 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("solver.steps must be positive"));
        }
        Ok(())
    }
}

/// A time-dependent field evaluated on a batch of states (one per row).
pub trait VectorField {
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor>;
}

impl VectorField for VelocityField {
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        self.forward_batch(z, &vec![t; z.rows()])
    }
}

/// Adapts a closure `(z, t) -> v` into a [`VectorField`].
pub struct FnField<F>(pub F);

impl<F: Fn(&Tensor, f64) -> Tensor> VectorField for FnField<F> {
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        Ok((self.0)(z, t))
    }
}

fn step_towards(z: &Tensor, v: &Tensor, h: f64) -> Tensor {
    let data = z.data().iter().zip(v.data()).map(|(zi, vi)| zi - h * vi).collect();
    Tensor::new(z.rows(), z.cols(), data)
}

fn checked(field: &dyn VectorField, z: &Tensor, t: f64) -> Result<Tensor> {
    let v = field.velocity(z, t)?;
    if v.shape() != z.shape() {
        return Err(Error::shape(format!("field returned {:?} for state {:?}", v.shape(), z.shape())));
    }
    Ok(v)
}

/// Integrates every row of `start` from `t = 1` to `t = 0` with
/// `config.steps` uniform steps. Rows are independent.
pub fn integrate_batch(field: &dyn VectorField, start: &Tensor, config: &SolverConfig) -> Result<Tensor> {
    config.validate()?;
    if !start.is_finite() {
        return Err(Error::NonFiniteInput("initial state".into()));
    }
    let n = config.steps;
    let h = 1.0 / n as f64;
    let mut z = start.clone();
    for k in 0..n {
        let t = (n - k) as f64 / n as f64;
        let t_next = (n - k - 1) as f64 / n as f64;
        let v1 = checked(field, &z, t)?;
        z = match config.method {
            SolverMethod::Euler => step_towards(&z, &v1, h),
            SolverMethod::Heun => {
                let predictor = step_towards(&z, &v1, h);
                let v2 = checked(field, &predictor, t_next)?;
                let data = z
                    .data()
                    .iter()
                    .zip(v1.data().iter().zip(v2.data()))
                    .map(|(zi, (a, b))| zi - 0.5 * h * (a + b))
                    .collect();
                Tensor::new(z.rows(), z.cols(), data)
            }
        };
        if !z.is_finite() {
            return Err(Error::Divergence { step: k + 1 });
        }
    }
    Ok(z)
}

/// Single-state form of [`integrate_batch`].
pub fn integrate(field: &dyn VectorField, start: &[f64], config: &SolverConfig) -> Result<Vec<f64>> {
    let z = Tensor::new(1, start.len(), start.to_vec());
    Ok(integrate_batch(field, &z, config)?.into_data())
}

/// Draws `count` standard-normal starts from `seed` and integrates them.
pub fn sample_batch(field: &dyn VectorField, count: usize, dim: usize, seed: u64, config: &SolverConfig) -> Result<Tensor> {
    if count == 0 {
        return Err(Error::config("sample count must be positive"));
    }
    let eps = sample_noise(count, dim, seed)?;
    integrate_batch(field, &eps, config)
}
