//! Training objectives.
//!
//! - flow matching against the schedule's velocity: mean over the batch of
//!   `‖v(z_t, t) - (a'(t) x0 + b'(t) eps)‖²`;
//! - the curvature regularizer `λ Δt Σ_i (a'_i b''_i - b'_i a''_i)²` over
//!   the interior grid nodes (left-point Riemann sum);
//! - their unweighted sum.

use serde::{Deserialize, Serialize};

use crate::diffengine::{Bindings, Graph, Tensor, Var};
use crate::schedule::{CoefficientSchedule, DerivativeGrid, GridCoefficients, GridSpec};
use crate::velocity_model::VelocityModel;
use crate::{Error, Result};

/// Data points, noise draws and times for one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: Vec<f64>,
}

impl Batch {
    pub fn new(x0: Tensor, eps: Tensor, t: Vec<f64>) -> Result<Self> {
        if x0.rows() == 0 {
            return Err(Error::config("empty batch"));
        }
        if x0.shape() != eps.shape() || t.len() != x0.rows() {
            return Err(Error::shape(format!(
                "batch x0 {:?}, eps {:?}, {} times",
                x0.shape(),
                eps.shape(),
                t.len()
            )));
        }
        Ok(Self { x0, eps, t })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub fm_loss: f64,
    pub curvature_loss: f64,
    pub total: f64,
    pub lambda: f64,
    pub lr: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.fm_loss.is_finite() && self.curvature_loss.is_finite() && self.total.is_finite()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("lambda must be a finite non-negative number, got {lambda}")))
    }
}

/// Graph form of the flow-matching loss. With `stop_gradient` the
/// regression target is detached, so the schedule only receives gradient
/// through `z_t`.
pub fn curve_fm_term(
    g: &Graph,
    bindings: &Bindings,
    batch: &Batch,
    model: &dyn VelocityModel,
    schedule: &CoefficientSchedule,
    h: f64,
    stop_gradient: bool,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let c = schedule.point_coefficients(g, bindings, &batch.t, h)?;
    let x0 = g.constant(batch.x0.clone());
    let eps = g.constant(batch.eps.clone());
    let z = g.add(g.scale_rows(c.a, x0), g.scale_rows(c.b, eps));
    let mut target = g.add(g.scale_rows(c.a_dot, x0), g.scale_rows(c.b_dot, eps));
    if stop_gradient {
        target = g.detach(target);
    }
    let v = model.velocity_graph(g, bindings, z, &batch.t)?;
    let residual = g.sub(v, target);
    Ok(g.scale(g.sum(g.square(residual)), 1.0 / batch.len() as f64))
}

/// Flow-matching loss value for fixed parameters.
pub fn curve_fm_loss(batch: &Batch, model: &dyn VelocityModel, schedule: &CoefficientSchedule, h: f64) -> Result<f64> {
    let g = Graph::new();
    let mut b = g.bind_constant(&schedule.params());
    if let Some(p) = model.parameters() {
        b.extend(g.bind_constant(p));
    }
    let loss = curve_fm_term(&g, &b, batch, model, schedule, h, false)?;
    g.check()?;
    Ok(g.scalar_value(loss))
}

/// `d_i = a'_i b''_i - b'_i a''_i` at the interior nodes.
pub fn determinant_profile(deriv: &DerivativeGrid) -> Vec<f64> {
    (0..deriv.len())
        .map(|i| deriv.a_dot[i] * deriv.b_ddot[i] - deriv.b_dot[i] * deriv.a_ddot[i])
        .collect()
}

/// Graph form of [`determinant_profile`].
pub fn determinant_term(g: &Graph, c: &GridCoefficients) -> Var {
    g.sub(g.mul(c.a_dot, c.b_ddot), g.mul(c.b_dot, c.a_ddot))
}

/// `Δt Σ d_i²` as a graph scalar.
pub fn determinant_integral_term(g: &Graph, bindings: &Bindings, schedule: &CoefficientSchedule, grid: &GridSpec) -> Result<Var> {
    let c = schedule.grid_coefficients(g, bindings, grid, false)?;
    let d = determinant_term(g, &c);
    Ok(g.scale(g.sum(g.square(d)), grid.dt()))
}

/// Unweighted `Δt Σ d_i²` for the schedule's current parameters.
pub fn determinant_integral(schedule: &CoefficientSchedule, grid: &GridSpec) -> Result<f64> {
    let g = Graph::new();
    let b = g.bind_constant(&schedule.params());
    let integral = determinant_integral_term(&g, &b, schedule, grid)?;
    g.check()?;
    Ok(g.scalar_value(integral))
}

/// Graph form of the regularizer, `λ Δt Σ d_i²`.
pub fn robust_curvature_term(g: &Graph, bindings: &Bindings, schedule: &CoefficientSchedule, grid: &GridSpec, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let integral = determinant_integral_term(g, bindings, schedule, grid)?;
    Ok(g.scale(integral, lambda))
}

/// Regularizer value for the schedule's current parameters.
pub fn robust_curvature_loss(schedule: &CoefficientSchedule, grid: &GridSpec, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let g = Graph::new();
    let b = g.bind_constant(&schedule.params());
    let loss = robust_curvature_term(&g, &b, schedule, grid, lambda)?;
    g.check()?;
    Ok(g.scalar_value(loss))
}

/// Both terms and their sum for fixed parameters.
pub fn total_loss(
    batch: &Batch,
    model: &dyn VelocityModel,
    schedule: &CoefficientSchedule,
    grid: &GridSpec,
    lambda: f64,
    h: f64,
) -> Result<LossReport> {
    check_lambda(lambda)?;
    let fm_loss = curve_fm_loss(batch, model, schedule, h)?;
    let curvature_loss = robust_curvature_loss(schedule, grid, lambda)?;
    Ok(LossReport {
        step: 0,
        fm_loss,
        curvature_loss,
        total: fm_loss + curvature_loss,
        lambda,
        lr: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::{compare_gradients, evaluate_with_gradients, finite_difference_gradient};
    use crate::schedule::{NeuralSchedule, PolynomialSchedule};
    use crate::velocity_model::{VelocityField, VelocityLayout};
    use crate::DEFAULT_STEP as H;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    /// Returns a fixed tensor regardless of input.
    struct Fixed(Tensor);

    impl VelocityModel for Fixed {
        fn velocity_graph(&self, g: &Graph, _: &Bindings, _: Var, _: &[f64]) -> Result<Var> {
            Ok(g.constant(self.0.clone()))
        }
    }

    fn unit_batch(copies: usize) -> Batch {
        let x0 = Tensor::from_rows(&vec![[1.0, 0.0]; copies]);
        let eps = Tensor::from_rows(&vec![[0.0, 1.0]; copies]);
        Batch::new(x0, eps, vec![0.3; copies]).unwrap()
    }

    fn grid() -> GridSpec {
        GridSpec::new(1000).unwrap()
    }

    #[test]
    fn zero_field_on_straight_line() {
        let lin = CoefficientSchedule::Linear;
        let l1 = curve_fm_loss(&unit_batch(1), &Fixed(Tensor::zeros(1, 2)), &lin, H).unwrap();
        assert_eq!(l1, 2.0);
        let l2 = curve_fm_loss(&unit_batch(2), &Fixed(Tensor::zeros(2, 2)), &lin, H).unwrap();
        assert_eq!(l2, 2.0);
    }

    #[test]
    fn perfect_field_has_zero_loss() {
        let s = CoefficientSchedule::Trigonometric;
        let batch = Batch::new(
            Tensor::from_rows(&[[1.0, 2.0], [-0.5, 0.3]]),
            Tensor::from_rows(&[[0.2, -1.0], [1.5, 0.7]]),
            vec![0.25, 0.8],
        )
        .unwrap();
        let rows: Vec<Vec<f64>> = (0..2)
            .map(|i| crate::trajectory::target_velocity(&s, batch.x0.row(i), batch.eps.row(i), batch.t[i], H).unwrap())
            .collect();
        let l = curve_fm_loss(&batch, &Fixed(Tensor::from_rows(&rows)), &s, H).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn empty_batch_rejected() {
        let err = Batch::new(Tensor::zeros(0, 2), Tensor::zeros(0, 2), vec![]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn determinant_profiles() {
        let lin = CoefficientSchedule::Linear.grid_derivatives(&grid(), false).unwrap();
        assert!(determinant_profile(&lin).iter().all(|d| d.abs() < 1e-9));

        let trig = CoefficientSchedule::Trigonometric.grid_derivatives(&grid(), false).unwrap();
        for d in determinant_profile(&trig) {
            assert_abs_diff_eq!(d, FRAC_PI_2.powi(3), epsilon = 1e-3);
        }

        let poly = CoefficientSchedule::Polynomial(PolynomialSchedule::new(vec![1.0, -1.0], vec![0.0, 0.0, 1.0]).unwrap());
        for d in determinant_profile(&poly.grid_derivatives(&grid(), false).unwrap()) {
            assert_abs_diff_eq!(d, -2.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn regularizer_values() {
        assert!(robust_curvature_loss(&CoefficientSchedule::Linear, &grid(), 3.0).unwrap() < 1e-12);
        let trig = robust_curvature_loss(&CoefficientSchedule::Trigonometric, &grid(), 1.0).unwrap();
        let exact = FRAC_PI_2.powi(6);
        assert!(((trig - exact) / exact).abs() < 0.01, "{trig} vs {exact}");
        let neural = CoefficientSchedule::Neural(NeuralSchedule::new(16, 1).unwrap());
        assert_eq!(robust_curvature_loss(&neural, &grid(), 0.0).unwrap(), 0.0);
        assert!(robust_curvature_loss(&neural, &grid(), -1.0).is_err());
    }

    #[test]
    fn regularizer_is_linear_in_lambda() {
        let neural = CoefficientSchedule::Neural(NeuralSchedule::new(16, 7).unwrap());
        for lambda in [1e-3, 0.1, 0.7, 5.0] {
            let one = robust_curvature_loss(&neural, &grid(), lambda).unwrap();
            let two = robust_curvature_loss(&neural, &grid(), 2.0 * lambda).unwrap();
            assert_eq!(two, 2.0 * one);
        }
    }

    #[test]
    fn regularizer_converges_quadratically_in_m() {
        let exact = FRAC_PI_2.powi(6);
        let err = |m| (robust_curvature_loss(&CoefficientSchedule::Trigonometric, &GridSpec::new(m).unwrap(), 1.0).unwrap() - exact).abs();
        // the sum also carries an O(Δt) term from dropping the endpoint
        // nodes, so compare against the exact interior sum instead
        let interior_exact = |m: usize| exact * (m - 1) as f64 / m as f64;
        let err2 = |m| (robust_curvature_loss(&CoefficientSchedule::Trigonometric, &GridSpec::new(m).unwrap(), 1.0).unwrap() - interior_exact(m)).abs();
        assert!(err(1000) / exact < 0.01);
        for m in [20, 40, 80] {
            assert!(err2(m) / err2(4 * m) > 3.5 * 3.5, "M={m}");
        }
    }

    #[test]
    fn total_is_sum_of_parts() {
        let lin = CoefficientSchedule::Linear;
        let batch = unit_batch(1);
        let perfect = Fixed(Tensor::from_rows(&[[-1.0, 1.0]]));
        let r = total_loss(&batch, &perfect, &lin, &grid(), 1.0, H).unwrap();
        assert_eq!(r.total, 0.0);

        let trig = CoefficientSchedule::Trigonometric;
        let target = crate::trajectory::target_velocity(&trig, &[1.0, 0.0], &[0.0, 1.0], 0.3, H).unwrap();
        let r = total_loss(&batch, &Fixed(Tensor::from_rows(&[target])), &trig, &grid(), 1.0, H).unwrap();
        assert_eq!(r.fm_loss, 0.0);
        assert!((r.total - FRAC_PI_2.powi(6)).abs() / FRAC_PI_2.powi(6) < 0.01);

        let r = total_loss(&batch, &Fixed(Tensor::zeros(1, 2)), &trig, &grid(), 0.0, H).unwrap();
        assert_eq!(r.total, r.fm_loss);
        assert_eq!(r.curvature_loss, 0.0);
    }

    #[test]
    fn total_loss_gradient_matches_differences() {
        let layout = VelocityLayout { dim: 2, hidden: 6, layers: 2, time_features: 4 };
        let model = VelocityField::with_layout(layout, 3).unwrap();
        let schedule = CoefficientSchedule::Neural(NeuralSchedule::new(5, 4).unwrap());
        let params = model.params().merged(&schedule.params()).unwrap();
        let batch = Batch::new(
            Tensor::from_rows(&[[1.0, -0.5], [0.3, 2.0], [-1.2, 0.4]]),
            Tensor::from_rows(&[[0.1, 0.9], [-0.7, -0.2], [1.1, -1.3]]),
            vec![0.2, 0.55, 0.0005],
        )
        .unwrap();
        let grid = GridSpec::new(16).unwrap();
        let f = |g: &Graph, b: &Bindings| -> Result<Var> {
            let fm = curve_fm_term(g, b, &batch, &model, &schedule, 1.0 / 16.0, false)?;
            let reg = robust_curvature_term(g, b, &schedule, &grid, 0.3)?;
            Ok(g.add(fm, reg))
        };
        let (_, ad) = evaluate_with_gradients(f, &params).unwrap();
        let fd = finite_difference_gradient(f, &params, 1e-5).unwrap();
        let d = compare_gradients(&ad, &fd, 1e-6);
        assert!(d.max_relative_error < 1e-4, "{d:?}");
    }

    #[test]
    fn stop_gradient_changes_only_schedule_gradient() {
        let layout = VelocityLayout { dim: 2, hidden: 6, layers: 2, time_features: 4 };
        let model = VelocityField::with_layout(layout, 3).unwrap();
        let schedule = CoefficientSchedule::Neural(NeuralSchedule::new(5, 4).unwrap());
        let params = model.params().merged(&schedule.params()).unwrap();
        let batch = unit_batch(2);
        let run = |stop| {
            evaluate_with_gradients(
                |g: &Graph, b: &Bindings| curve_fm_term(g, b, &batch, &model, &schedule, H, stop),
                &params,
            )
            .unwrap()
        };
        let (v1, g1) = run(false);
        let (v2, g2) = run(true);
        assert_eq!(v1, v2);
        assert_eq!(g1.get("velocity.l0.w"), g2.get("velocity.l0.w"));
        assert_ne!(g1.get("schedule.a.l2.w"), g2.get("schedule.a.l2.w"));
    }
}
