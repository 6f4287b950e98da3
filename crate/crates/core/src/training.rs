//! Optimization loop.
//!
//! One AdamW optimizer updates the velocity network and, when the schedule
//! is neural and trainable, both residual networks. Each step draws a
//! minibatch (shuffled per epoch), one noise vector and one time per
//! sample, evaluates the flow-matching loss and, for `lambda > 0`, the
//! full-grid curvature regularizer, then applies a single update.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{GradientMap, Graph, ParameterSet, Tensor};
use crate::losses::{curve_fm_term, robust_curvature_term, Batch, LossReport};
use crate::rng::{self, streams, NormalSampler};
use crate::schedule::{CoefficientSchedule, GridSpec};
use crate::velocity_model::VelocityField;
use crate::{Error, Result};

/// Draws are clamped to `[T_MIN, 1 - T_MIN]`.
pub const T_MIN: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimestepSampler {
    #[serde(rename = "uniform")]
    Uniform,
    #[serde(rename = "logit-normal")]
    LogitNormal,
}

impl FromStr for TimestepSampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(TimestepSampler::Uniform),
            "logit-normal" => Ok(TimestepSampler::LogitNormal),
            other => Err(Error::config(format!("unknown timestep sampler `{other}`"))),
        }
    }
}

impl fmt::Display for TimestepSampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimestepSampler::Uniform => "uniform",
            TimestepSampler::LogitNormal => "logit-normal",
        })
    }
}

/// One time draw: `U(0, 1)` or `sigmoid(N(0, 1))`, clamped away from the
/// endpoints.
pub fn sample_timestep<R: Rng>(kind: TimestepSampler, source: &mut NormalSampler<R>) -> f64 {
    let t = match kind {
        TimestepSampler::Uniform => rng::uniform_open(source.rng_mut()),
        TimestepSampler::LogitNormal => 1.0 / (1.0 + (-source.next()).exp()),
    };
    t.clamp(T_MIN, 1.0 - T_MIN)
}

/// Training hyperparameters.
///
/// Defaults follow a desk-scale regime: `base_lr = 1e-3` in `f64` rather
/// than the `1e-5` used for large-model adapter fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub poly_power: f64,
    pub lambda: f64,
    pub grid_m: usize,
    pub timestep_sampler: TimestepSampler,
    pub seed: u64,
    /// Detach the regression target from the schedule parameters.
    pub stop_gradient_target: bool,
    /// Update the schedule's residual networks (neural kind only).
    pub train_schedule: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            base_lr: 1e-3,
            warmup_steps: 100,
            poly_power: 1.0,
            lambda: 0.001,
            grid_m: crate::DEFAULT_GRID_M,
            timestep_sampler: TimestepSampler::Uniform,
            seed: 0,
            stop_gradient_target: false,
            train_schedule: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("train.base_lr must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("train.lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.poly_power > 0.0 && self.poly_power.is_finite()) {
            return Err(Error::config("train.poly_power must be positive"));
        }
        GridSpec::new(self.grid_m).map_err(|_| Error::config("train.grid_m must be at least 4"))?;
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.epochs * self.steps_per_epoch(dataset_len)
    }
}

/// Linear warmup to `base_lr`, then polynomial decay to zero at
/// `total_steps`.
pub fn lr_at(step: usize, config: &TrainConfig, total_steps: usize) -> f64 {
    let warmup = config.warmup_steps;
    if step < warmup {
        return config.base_lr * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return config.base_lr;
    }
    let progress = ((step - warmup) as f64 / (total_steps - warmup) as f64).min(1.0);
    config.base_lr * (1.0 - progress).powf(config.poly_power)
}

/// AdamW moments and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: ParameterSet,
    pub v: ParameterSet,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One decoupled-weight-decay Adam update of every parameter named in
/// `grads`. Nothing is modified if any gradient is non-finite.
pub fn adamw_step(params: &mut ParameterSet, grads: &GradientMap, state: &mut OptimizerState, lr: f64) -> Result<()> {
    let step = state.step + 1;
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { name: name.to_string(), step });
        }
        let shape = params.get(name).map(Tensor::shape);
        if shape.is_none() || shape != state.m.get(name).map(Tensor::shape) || shape != Some(g.shape()) {
            return Err(Error::shape(format!("optimizer state and gradient disagree on `{name}`")));
        }
    }
    let bc1 = 1.0 - state.beta1.powi(step as i32);
    let bc2 = 1.0 - state.beta2.powi(step as i32);
    for (name, g) in grads.iter() {
        let theta = params.get_mut(name).expect("checked").data_mut();
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        for i in 0..theta.len() {
            let gi = g.data()[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + state.eps) - lr * state.weight_decay * theta[i];
        }
    }
    state.step = step;
    Ok(())
}

/// Models and optimizer after some number of updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedState {
    pub schedule: CoefficientSchedule,
    pub velocity: VelocityField,
    pub optimizer: OptimizerState,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainedState,
    pub history: Vec<LossReport>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Invalid(#[from] Error),

    /// The step failed; `partial` holds the state before it.
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String, partial: Box<TrainOutcome> },
}

fn trainable_params(schedule: &CoefficientSchedule, velocity: &VelocityField, train_schedule: bool) -> Result<ParameterSet> {
    let mut params = velocity.params().clone();
    if train_schedule {
        params = params.merged(&schedule.params())?;
    }
    Ok(params)
}

fn write_back(schedule: &mut CoefficientSchedule, velocity: &mut VelocityField, params: &ParameterSet) -> Result<()> {
    velocity.set_params(params.with_prefix("velocity."))?;
    if let CoefficientSchedule::Neural(n) = schedule {
        let sp = params.with_prefix("schedule.");
        if !sp.is_empty() {
            n.set_params(sp)?;
        }
    }
    Ok(())
}

/// Trains `velocity` (and a trainable neural `schedule`) on the rows of
/// `dataset`. Deterministic given `config.seed`.
pub fn train(
    config: &TrainConfig,
    dataset: &Tensor,
    schedule: CoefficientSchedule,
    velocity: VelocityField,
) -> Result<TrainOutcome, TrainError> {
    train_with_hook(config, dataset, schedule, velocity, |_, _| {})
}

/// As [`train`], calling `hook(step, &report)` after every update.
pub fn train_with_hook(
    config: &TrainConfig,
    dataset: &Tensor,
    mut schedule: CoefficientSchedule,
    mut velocity: VelocityField,
    mut hook: impl FnMut(u64, &LossReport),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.rows() == 0 {
        return Err(Error::config("dataset is empty").into());
    }
    if dataset.cols() != velocity.dim() {
        return Err(Error::shape(format!(
            "dataset has {} columns, velocity model expects {}",
            dataset.cols(),
            velocity.dim()
        ))
        .into());
    }
    let grid = GridSpec::new(config.grid_m)?;
    let h = grid.dt();
    let n = dataset.rows();
    let dim = dataset.cols();
    let total_steps = config.total_steps(n);
    let train_schedule = config.train_schedule && matches!(schedule, CoefficientSchedule::Neural(_));

    let mut params = trainable_params(&schedule, &velocity, train_schedule)?;
    let frozen = if train_schedule { ParameterSet::new() } else { schedule.params() };
    let mut optimizer = OptimizerState::new(&params);

    let mut shuffle_rng: ChaCha8Rng = rng::stream(config.seed, streams::SHUFFLE);
    let mut noise = NormalSampler::new(rng::stream(config.seed, streams::TRAIN_NOISE));
    let mut times = NormalSampler::new(rng::stream(config.seed, streams::TIMESTEP));
    let mut history = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step: u64 = 0;

    for _epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let x0 = dataset.select_rows(chunk);
            let eps = Tensor::new(chunk.len(), dim, (0..chunk.len() * dim).map(|_| noise.next()).collect());
            let ts: Vec<f64> = (0..chunk.len()).map(|_| sample_timestep(config.timestep_sampler, &mut times)).collect();
            let batch = Batch::new(x0, eps, ts)?;

            let g = Graph::new();
            let mut bindings = g.bind(&params);
            bindings.extend(g.bind_constant(&frozen));
            let fm = curve_fm_term(&g, &bindings, &batch, &velocity, &schedule, h, config.stop_gradient_target)?;
            let reg = if config.lambda > 0.0 {
                Some(robust_curvature_term(&g, &bindings, &schedule, &grid, config.lambda)?)
            } else {
                None
            };
            let total = match reg {
                Some(r) => g.add(fm, r),
                None => fm,
            };

            let fail = |reason: String, params: &ParameterSet, optimizer: &OptimizerState, history: Vec<LossReport>| {
                let mut schedule = schedule.clone();
                let mut velocity = velocity.clone();
                if let Err(e) = write_back(&mut schedule, &mut velocity, params) {
                    return TrainError::Invalid(e);
                }
                TrainError::Diverged {
                    step: step + 1,
                    reason,
                    partial: Box::new(TrainOutcome {
                        state: TrainedState { schedule, velocity, optimizer: optimizer.clone(), step },
                        history,
                    }),
                }
            };

            let grads = match g.gradients(total, &bindings) {
                Ok(grads) => grads,
                Err(e) => return Err(fail(e.to_string(), &params, &optimizer, history)),
            };
            let lr = lr_at(step as usize + 1, config, total_steps);
            if let Err(e) = adamw_step(&mut params, &grads, &mut optimizer, lr) {
                return Err(fail(e.to_string(), &params, &optimizer, history));
            }
            step += 1;

            let fm_loss = g.scalar_value(fm);
            let curvature_loss = reg.map_or(0.0, |r| g.scalar_value(r));
            let report = LossReport {
                step,
                fm_loss,
                curvature_loss,
                total: g.scalar_value(total),
                lambda: config.lambda,
                lr,
            };
            hook(step, &report);
            history.push(report);
        }
    }

    write_back(&mut schedule, &mut velocity, &params)?;
    Ok(TrainOutcome {
        state: TrainedState { schedule, velocity, optimizer, step },
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DatasetKind, DatasetSpec};
    use crate::schedule::NeuralSchedule;
    use crate::velocity_model::VelocityLayout;

    fn sampler(seed: u64) -> NormalSampler<ChaCha8Rng> {
        NormalSampler::new(rng::stream(seed, streams::TIMESTEP))
    }

    #[test]
    fn uniform_timesteps() {
        let mut s = sampler(1);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_timestep(TimestepSampler::Uniform, &mut s)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
        assert!(draws.iter().all(|&t| t > 0.0 && t < 1.0));
    }

    #[test]
    fn logit_normal_median() {
        let mut s = sampler(2);
        let mut draws: Vec<f64> = (0..100_000).map(|_| sample_timestep(TimestepSampler::LogitNormal, &mut s)).collect();
        assert!(draws.iter().all(|&t| t > 0.0 && t < 1.0));
        draws.sort_by(f64::total_cmp);
        assert!((draws[50_000] - 0.5).abs() < 0.01);
    }

    #[test]
    fn unknown_sampler_rejected() {
        assert!(matches!("cosmap".parse::<TimestepSampler>(), Err(Error::Config(_))));
        assert_eq!("logit-normal".parse::<TimestepSampler>().unwrap(), TimestepSampler::LogitNormal);
    }

    fn one_param(value: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(value)).unwrap();
        p
    }

    fn grads_of(p: &ParameterSet, value: f64) -> GradientMap {
        let g = Graph::new();
        let b = g.bind(p);
        let w = b.get("w").unwrap();
        let loss = g.sum(g.scale(w, value));
        g.gradients(loss, &b).unwrap()
    }

    #[test]
    fn first_adamw_update() {
        let mut p = one_param(1.0);
        let mut s = OptimizerState::new(&p);
        let grads = grads_of(&p, 0.5);
        adamw_step(&mut p, &grads, &mut s, 1e-3).unwrap();
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8) - 1e-3 * 0.01;
        assert_eq!(p.get("w").unwrap().data()[0], expected);
        assert!((expected - 0.99899).abs() < 1e-10);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_decays_geometrically() {
        let mut p = one_param(2.0);
        let mut s = OptimizerState::new(&p);
        let lr = 0.1;
        for k in 1..=5 {
            let grads = grads_of(&p, 0.0);
            adamw_step(&mut p, &grads, &mut s, lr).unwrap();
            let expected = 2.0 * (1.0 - lr * 0.01f64).powi(k);
            assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_histories_identical_updates() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::new(1, 2, vec![0.7, 0.7])).unwrap();
        let mut s = OptimizerState::new(&p);
        for gval in [0.3, -1.2, 0.05] {
            let g = Graph::new();
            let b = g.bind(&p);
            let loss = g.sum(g.scale(b.get("w").unwrap(), gval));
            let grads = g.gradients(loss, &b).unwrap();
            adamw_step(&mut p, &grads, &mut s, 1e-2).unwrap();
            let d = p.get("w").unwrap().data();
            assert_eq!(d[0].to_bits(), d[1].to_bits());
        }
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig { warmup_steps: 100, base_lr: 1e-3, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &cfg, 1000), 0.0);
        assert_eq!(lr_at(100, &cfg, 1000), 1e-3);
        assert_eq!(lr_at(1000, &cfg, 1000), 0.0);
        assert!((lr_at(50, &cfg, 1000) - 5e-4).abs() < 1e-18);
        let below = lr_at(99, &cfg, 1000);
        let above = lr_at(101, &cfg, 1000);
        assert!((below - 1e-3).abs() < 2e-5 && (above - 1e-3).abs() < 2e-5);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { lambda: -1.0, ..TrainConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("lambda"));
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::default().total_steps(2000), 100 * 125);
        assert_eq!(TrainConfig { batch_size: 16, ..TrainConfig::default() }.steps_per_epoch(17), 2);
    }

    fn small_setup(lambda: f64, epochs: usize) -> (TrainConfig, Tensor, VelocityField) {
        let cfg = TrainConfig { epochs, batch_size: 32, lambda, grid_m: 50, warmup_steps: 5, seed: 3, ..TrainConfig::default() };
        let data = generate(&DatasetSpec { kind: DatasetKind::Gaussians8, count: 128, seed: 1, noise_std: 0.1 }).unwrap();
        let layout = VelocityLayout { dim: 2, hidden: 32, layers: 2, time_features: 8 };
        (cfg, data, VelocityField::with_layout(layout, 3).unwrap())
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, data, v) = small_setup(0.01, 2);
        let s = CoefficientSchedule::Neural(NeuralSchedule::new(8, 3).unwrap());
        let a = train(&cfg, &data, s.clone(), v.clone()).unwrap();
        let b = train(&cfg, &data, s, v).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.state, b.state);
        assert_eq!(a.history.len(), 2 * 4);
        assert_eq!(a.state.step, 8);
        assert!(a.history.iter().all(LossReport::is_finite));
    }

    #[test]
    fn zero_residual_frozen_schedule_reduces_to_rectified_flow() {
        let (mut cfg, data, v) = small_setup(0.0, 2);
        cfg.train_schedule = false;
        let zeroed = CoefficientSchedule::Neural(NeuralSchedule::zeroed(8, 3).unwrap());
        let curve = train(&cfg, &data, zeroed, v.clone()).unwrap();
        let rf = train(&cfg, &data, CoefficientSchedule::Linear, v).unwrap();
        assert_eq!(curve.history, rf.history);
        assert_eq!(curve.state.velocity, rf.state.velocity);
    }

    #[test]
    fn frozen_schedule_is_untouched() {
        let (mut cfg, data, v) = small_setup(0.5, 1);
        cfg.train_schedule = false;
        let s = CoefficientSchedule::Neural(NeuralSchedule::new(8, 3).unwrap());
        let out = train(&cfg, &data, s.clone(), v).unwrap();
        assert_eq!(out.state.schedule, s);
        assert!(out.history.iter().all(|r| r.curvature_loss > 0.0));
    }

    #[test]
    fn divergence_reports_step_and_keeps_last_state() {
        let (mut cfg, data, v) = small_setup(0.0, 3);
        cfg.base_lr = 1e300;
        cfg.warmup_steps = 1;
        let s = CoefficientSchedule::Linear;
        match train(&cfg, &data, s, v) {
            Err(TrainError::Diverged { step, partial, .. }) => {
                assert_eq!(partial.state.step + 1, step);
                assert_eq!(partial.history.len() as u64, partial.state.step);
                assert!(partial.state.velocity.params().iter().all(|(_, t)| t.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let (cfg, _, v) = small_setup(0.0, 1);
        let err = train(&cfg, &Tensor::zeros(0, 2), CoefficientSchedule::Linear, v).unwrap_err();
        assert!(matches!(err, TrainError::Invalid(Error::Config(_))));
    }
}
