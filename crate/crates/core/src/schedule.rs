//! Interpolant coefficient schedules `a(t)`, `b(t)`.
//!
//! Every schedule satisfies `a(0) = 1`, `b(0) = 0`, `a(1) = 0`, `b(1) = 1`.
//! The neural kind gets this by construction:
//!
//! ```text
//! a(t) = (1 - t) + t (1 - t) f(t)
//! b(t) =       t + t (1 - t) g(t)
//! ```
//!
//! where `f` and `g` are small tanh MLPs over a sinusoidal embedding of `t`.
//! With `f = g = 0` this is exactly the rectified-flow line.
//!
//! Derivatives of the neural kind are finite differences. Only the residual
//! `t (1 - t) f(t)` is differenced; the straight-line part contributes its
//! exact slope (`-1` or `+1`) and zero second derivative. Algebraically this
//! is the same stencil applied to `a` itself, but it keeps the zero-residual
//! case bit-identical to the linear schedule.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffengine::{Bindings, Graph, ParameterSet, Tensor, Var};
use crate::nn::{sinusoidal_features, Activation, Mlp};
use crate::rng::{self, streams};
use crate::{Error, Result};

/// Frequencies of the 8-feature time embedding fed to the residual nets.
pub const SCHEDULE_FREQUENCIES: [f64; 4] = [FRAC_PI_2, std::f64::consts::PI, 2.0 * std::f64::consts::PI, 4.0 * std::f64::consts::PI];

pub const DEFAULT_SCHEDULE_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Neural,
    Linear,
    Trigonometric,
    Polynomial,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neural" => Ok(ScheduleKind::Neural),
            "linear" => Ok(ScheduleKind::Linear),
            "trigonometric" => Ok(ScheduleKind::Trigonometric),
            "polynomial" => Ok(ScheduleKind::Polynomial),
            other => Err(Error::config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Neural => "neural",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Trigonometric => "trigonometric",
            ScheduleKind::Polynomial => "polynomial",
        })
    }
}

/// Uniform grid `t_i = i / M`, `i = 0..=M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    m: usize,
}

impl GridSpec {
    pub fn new(m: usize) -> Result<Self> {
        if m < 4 {
            return Err(Error::config(format!("grid M must be at least 4, got {m}")));
        }
        Ok(Self { m })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 / self.m as f64
    }

    /// All `M + 1` nodes, endpoints exactly 0 and 1.
    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.m).map(|i| self.node(i)).collect()
    }

    /// Interior nodes `t_1 .. t_{M-1}`.
    pub fn interior(&self) -> Vec<f64> {
        (1..self.m).map(|i| self.node(i)).collect()
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { m: crate::DEFAULT_GRID_M }
    }
}

/// First and second derivatives at the interior grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeGrid {
    pub t: Vec<f64>,
    pub a_dot: Vec<f64>,
    pub b_dot: Vec<f64>,
    pub a_ddot: Vec<f64>,
    pub b_ddot: Vec<f64>,
}

impl DerivativeGrid {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Coefficients and their first derivatives at a batch of times, as graph
/// columns (`B x 1`).
#[derive(Debug, Clone, Copy)]
pub struct PointCoefficients {
    pub a: Var,
    pub b: Var,
    pub a_dot: Var,
    pub b_dot: Var,
}

/// Grid derivatives as graph columns (`(M - 1) x 1`).
#[derive(Debug, Clone, Copy)]
pub struct GridCoefficients {
    pub a_dot: Var,
    pub b_dot: Var,
    pub a_ddot: Var,
    pub b_ddot: Var,
}

/// Closed-form polynomial coefficients, differentiated numerically like the
/// neural kind. Useful as a stand-in whose derivatives are known exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolynomialSchedule {
    /// Ascending coefficients of `a(t)`.
    pub a: Vec<f64>,
    /// Ascending coefficients of `b(t)`.
    pub b: Vec<f64>,
}

impl PolynomialSchedule {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let p = Self { a, b };
        let ends = [(p.eval_a(0.0), 1.0), (p.eval_a(1.0), 0.0), (p.eval_b(0.0), 0.0), (p.eval_b(1.0), 1.0)];
        if ends.iter().any(|(got, want)| got != want) {
            return Err(Error::config("polynomial schedule violates the boundary conditions"));
        }
        Ok(p)
    }

    fn horner(coeffs: &[f64], t: f64) -> f64 {
        coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    pub fn eval_a(&self, t: f64) -> f64 {
        Self::horner(&self.a, t)
    }

    pub fn eval_b(&self, t: f64) -> f64 {
        Self::horner(&self.b, t)
    }
}

/// Residual-network schedule. Parameters are named `schedule.a.*` (φ) and
/// `schedule.b.*` (ψ).
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralSchedule {
    hidden: usize,
    net_a: Mlp,
    net_b: Mlp,
    params: ParameterSet,
}

impl NeuralSchedule {
    fn nets(hidden: usize) -> (Mlp, Mlp) {
        let sizes = vec![2 * SCHEDULE_FREQUENCIES.len(), hidden, hidden, 1];
        (
            Mlp::new("schedule.a", sizes.clone(), Activation::Tanh),
            Mlp::new("schedule.b", sizes, Activation::Tanh),
        )
    }

    /// Glorot-initialized residual nets (3 layers, `hidden` wide).
    pub fn new(hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::config("schedule hidden width must be positive"));
        }
        let (net_a, net_b) = Self::nets(hidden);
        let params = net_a
            .init_params(&mut rng::stream(seed, streams::INIT_SCHEDULE_A))
            .merged(&net_b.init_params(&mut rng::stream(seed, streams::INIT_SCHEDULE_B)))?;
        Ok(Self { hidden, net_a, net_b, params })
    }

    /// Same hidden layers as [`NeuralSchedule::new`] but with the output
    /// layers zeroed, so `f = g = 0` exactly.
    pub fn zeroed(hidden: usize, seed: u64) -> Result<Self> {
        let mut s = Self::new(hidden, seed)?;
        for net in [s.net_a.clone(), s.net_b.clone()] {
            let last = net.layer_count() - 1;
            for name in [net.weight_name(last), net.bias_name(last)] {
                let t = s.params.get_mut(&name).expect("own parameter");
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(s)
    }

    /// Rebuilds a schedule from stored parameters.
    pub fn from_params(hidden: usize, params: ParameterSet) -> Result<Self> {
        let template = Self::new(hidden, 0)?;
        if !template.params.same_layout(&params) {
            return Err(Error::config("schedule parameters do not match the declared hidden width"));
        }
        Ok(Self { params, ..template })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    /// Replaces the parameters; names and shapes must match.
    pub fn set_params(&mut self, params: ParameterSet) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::config("schedule parameter layout mismatch"));
        }
        self.params = params;
        Ok(())
    }

    /// `t (1 - t) f(t)` and `t (1 - t) g(t)` as `n x 1` columns.
    pub fn residuals(&self, g: &Graph, bindings: &Bindings, ts: &[f64]) -> Result<(Var, Var)> {
        let features = g.constant(sinusoidal_features(ts, &SCHEDULE_FREQUENCIES));
        let window = g.constant(Tensor::column(ts.iter().map(|t| t * (1.0 - t)).collect()));
        let fa = self.net_a.forward(g, bindings, features)?;
        let fb = self.net_b.forward(g, bindings, features)?;
        Ok((g.mul(window, fa), g.mul(window, fb)))
    }

    fn residuals_plain(&self, ts: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let g = Graph::new();
        let b = g.bind_constant(&self.params);
        let (ra, rb) = self.residuals(&g, &b, ts)?;
        g.check()?;
        Ok((g.value(ra).into_data(), g.value(rb).into_data()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientSchedule {
    Linear,
    Trigonometric,
    Polynomial(PolynomialSchedule),
    Neural(NeuralSchedule),
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain { t })
    }
}

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h <= 0.5 {
        Ok(())
    } else {
        Err(Error::config(format!("derivative step must lie in (0, 0.5], got {h}")))
    }
}

/// Evaluation points `(lo, hi)` for a first difference at `t`, clamped to
/// the unit interval (one-sided at the ends).
fn first_stencil(t: f64, h: f64) -> (f64, f64) {
    ((t - h).max(0.0), (t + h).min(1.0))
}

/// Centre of a three-point second-difference stencil kept inside [0, 1].
fn second_stencil_center(t: f64, h: f64) -> f64 {
    t.clamp(h, 1.0 - h)
}

impl CoefficientSchedule {
    pub fn kind(&self) -> ScheduleKind {
        match self {
            CoefficientSchedule::Linear => ScheduleKind::Linear,
            CoefficientSchedule::Trigonometric => ScheduleKind::Trigonometric,
            CoefficientSchedule::Polynomial(_) => ScheduleKind::Polynomial,
            CoefficientSchedule::Neural(_) => ScheduleKind::Neural,
        }
    }

    /// Trainable parameters, empty for closed-form kinds.
    pub fn params(&self) -> ParameterSet {
        match self {
            CoefficientSchedule::Neural(n) => n.params().clone(),
            _ => ParameterSet::new(),
        }
    }

    /// Closed-form `(a, b)`; `None` for the neural kind.
    fn closed_form(&self, t: f64) -> Option<(f64, f64)> {
        match self {
            CoefficientSchedule::Linear => Some((1.0 - t, t)),
            CoefficientSchedule::Trigonometric => Some(if t == 0.0 {
                (1.0, 0.0)
            } else if t == 1.0 {
                (0.0, 1.0)
            } else {
                let x = FRAC_PI_2 * t;
                (x.cos(), x.sin())
            }),
            CoefficientSchedule::Polynomial(p) => Some((p.eval_a(t), p.eval_b(t))),
            CoefficientSchedule::Neural(_) => None,
        }
    }

    /// Exact `(a', b', a'', b'')` for the linear and trigonometric kinds.
    fn exact_derivatives(&self, t: f64) -> Option<[f64; 4]> {
        match self {
            CoefficientSchedule::Linear => Some([-1.0, 1.0, 0.0, 0.0]),
            CoefficientSchedule::Trigonometric => {
                let (s, c) = (FRAC_PI_2 * t).sin_cos();
                let w2 = FRAC_PI_2 * FRAC_PI_2;
                Some([-FRAC_PI_2 * s, FRAC_PI_2 * c, -w2 * c, -w2 * s])
            }
            _ => None,
        }
    }

    /// `(a(t), b(t))` for many times at once.
    pub fn eval_many(&self, ts: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        for &t in ts {
            check_time(t)?;
        }
        match self {
            CoefficientSchedule::Neural(n) => {
                let (ra, rb) = n.residuals_plain(ts)?;
                Ok(ts
                    .iter()
                    .zip(ra.iter().zip(&rb))
                    .map(|(&t, (&ra, &rb))| ((1.0 - t) + ra, t + rb))
                    .unzip())
            }
            _ => Ok(ts.iter().map(|&t| self.closed_form(t).expect("closed form")).unzip()),
        }
    }

    pub fn eval(&self, t: f64) -> Result<(f64, f64)> {
        let (a, b) = self.eval_many(&[t])?;
        Ok((a[0], b[0]))
    }

    pub fn eval_a(&self, t: f64) -> Result<f64> {
        Ok(self.eval(t)?.0)
    }

    pub fn eval_b(&self, t: f64) -> Result<f64> {
        Ok(self.eval(t)?.1)
    }

    /// `(a'(t), b'(t))`. Closed-form for the linear and trigonometric kinds;
    /// otherwise a central difference with step `h`, one-sided where the
    /// stencil would leave [0, 1].
    pub fn pointwise_derivatives(&self, t: f64, h: f64) -> Result<(f64, f64)> {
        check_time(t)?;
        check_step(h)?;
        if let Some([ad, bd, _, _]) = self.exact_derivatives(t) {
            return Ok((ad, bd));
        }
        let (lo, hi) = first_stencil(t, h);
        let span = hi - lo;
        match self {
            CoefficientSchedule::Neural(n) => {
                let (ra, rb) = n.residuals_plain(&[lo, hi])?;
                Ok((-1.0 + (ra[1] - ra[0]) / span, 1.0 + (rb[1] - rb[0]) / span))
            }
            _ => {
                let (a, b) = self.eval_many(&[lo, hi])?;
                Ok(((a[1] - a[0]) / span, (b[1] - b[0]) / span))
            }
        }
    }

    /// `(a''(t), b''(t))` by a three-point stencil of step `h`, shifted
    /// inward near the endpoints. Closed-form for the analytic kinds.
    pub fn pointwise_second_derivatives(&self, t: f64, h: f64) -> Result<(f64, f64)> {
        check_time(t)?;
        check_step(h)?;
        if let Some([_, _, add, bdd]) = self.exact_derivatives(t) {
            return Ok((add, bdd));
        }
        let c = second_stencil_center(t, h);
        let pts = [c - h, c, c + h];
        let second = |v: &[f64]| (v[2] - 2.0 * v[1] + v[0]) / (h * h);
        match self {
            CoefficientSchedule::Neural(n) => {
                let (ra, rb) = n.residuals_plain(&pts)?;
                Ok((second(&ra), second(&rb)))
            }
            _ => {
                let (a, b) = self.eval_many(&pts)?;
                Ok((second(&a), second(&b)))
            }
        }
    }

    /// Central-difference derivatives at the interior nodes of `grid`.
    ///
    /// The linear kind always returns its closed-form values. With `exact`
    /// set, the trigonometric kind does too; other kinds ignore the flag.
    pub fn grid_derivatives(&self, grid: &GridSpec, exact: bool) -> Result<DerivativeGrid> {
        let g = Graph::new();
        let b = g.bind_constant(&self.params());
        let c = self.grid_coefficients(&g, &b, grid, exact)?;
        g.check()?;
        Ok(DerivativeGrid {
            t: grid.interior(),
            a_dot: g.value(c.a_dot).into_data(),
            b_dot: g.value(c.b_dot).into_data(),
            a_ddot: g.value(c.a_ddot).into_data(),
            b_ddot: g.value(c.b_ddot).into_data(),
        })
    }

    /// Graph form of [`CoefficientSchedule::grid_derivatives`]; gradients
    /// reach the residual parameters through every stencil value.
    pub fn grid_coefficients(&self, g: &Graph, bindings: &Bindings, grid: &GridSpec, exact: bool) -> Result<GridCoefficients> {
        let m = grid.m();
        let half_inv_dt = m as f64 / 2.0;
        let inv_dt2 = (m * m) as f64;
        let interior = grid.interior();

        // The straight line has a zero residual, so differencing it (as the
        // neural kind differences only its residual) gives the exact values.
        let closed_form = match self {
            CoefficientSchedule::Linear => true,
            CoefficientSchedule::Trigonometric => exact,
            _ => false,
        };
        if closed_form {
            let cols: Vec<[f64; 4]> = interior
                .iter()
                .map(|&t| self.exact_derivatives(t).expect("analytic"))
                .collect();
            let col = |k: usize| g.constant(Tensor::column(cols.iter().map(|d| d[k]).collect()));
            return Ok(GridCoefficients { a_dot: col(0), b_dot: col(1), a_ddot: col(2), b_ddot: col(3) });
        }

        let stencils = |v: Var, slope: f64| {
            let next = g.slice_rows(v, 2, m - 1);
            let prev = g.slice_rows(v, 0, m - 1);
            let mid = g.slice_rows(v, 1, m - 1);
            let mut first = g.scale(g.sub(next, prev), half_inv_dt);
            if slope != 0.0 {
                first = g.add(g.constant(Tensor::filled(m - 1, 1, slope)), first);
            }
            let second = g.scale(g.add(g.sub(next, g.scale(mid, 2.0)), prev), inv_dt2);
            (first, second)
        };

        match self {
            CoefficientSchedule::Neural(n) => {
                let (ra, rb) = n.residuals(g, bindings, &grid.nodes())?;
                let (a_dot, a_ddot) = stencils(ra, -1.0);
                let (b_dot, b_ddot) = stencils(rb, 1.0);
                Ok(GridCoefficients { a_dot, b_dot, a_ddot, b_ddot })
            }
            _ => {
                let (a, b) = self.eval_many(&grid.nodes())?;
                let (a_dot, a_ddot) = stencils(g.constant(Tensor::column(a)), 0.0);
                let (b_dot, b_ddot) = stencils(g.constant(Tensor::column(b)), 0.0);
                Ok(GridCoefficients { a_dot, b_dot, a_ddot, b_ddot })
            }
        }
    }

    /// Graph form of `a`, `b`, `a'`, `b'` at a batch of times, with first
    /// derivatives taken like [`CoefficientSchedule::pointwise_derivatives`].
    pub fn point_coefficients(&self, g: &Graph, bindings: &Bindings, ts: &[f64], h: f64) -> Result<PointCoefficients> {
        for &t in ts {
            check_time(t)?;
        }
        check_step(h)?;
        let n = ts.len();
        let col = |v: Vec<f64>| g.constant(Tensor::column(v));
        match self {
            CoefficientSchedule::Neural(net) => {
                let (lo, hi): (Vec<f64>, Vec<f64>) = ts.iter().map(|&t| first_stencil(t, h)).unzip();
                let mut all = ts.to_vec();
                all.extend_from_slice(&lo);
                all.extend_from_slice(&hi);
                let (ra, rb) = net.residuals(g, bindings, &all)?;
                let inv_span = col(lo.iter().zip(&hi).map(|(l, h)| 1.0 / (h - l)).collect());
                let diff = |r: Var, slope: f64| {
                    let d = g.mul(g.sub(g.slice_rows(r, 2 * n, n), g.slice_rows(r, n, n)), inv_span);
                    g.add(col(vec![slope; n]), d)
                };
                Ok(PointCoefficients {
                    a: g.add(col(ts.iter().map(|t| 1.0 - t).collect()), g.slice_rows(ra, 0, n)),
                    b: g.add(col(ts.to_vec()), g.slice_rows(rb, 0, n)),
                    a_dot: diff(ra, -1.0),
                    b_dot: diff(rb, 1.0),
                })
            }
            _ => {
                let (a, b) = self.eval_many(ts)?;
                let (ad, bd): (Vec<f64>, Vec<f64>) = ts
                    .iter()
                    .map(|&t| self.pointwise_derivatives(t, h))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .unzip();
                Ok(PointCoefficients { a: col(a), b: col(b), a_dot: col(ad), b_dot: col(bd) })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn quadratic_b() -> CoefficientSchedule {
        CoefficientSchedule::Polynomial(PolynomialSchedule::new(vec![1.0, -1.0], vec![0.0, 0.0, 1.0]).unwrap())
    }

    #[test]
    fn grid_requires_four_intervals() {
        assert!(matches!(GridSpec::new(3), Err(Error::Config(_))));
        let g = GridSpec::new(4).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.interior().len(), 3);
    }

    #[test]
    fn domain_error_outside_unit_interval() {
        let s = CoefficientSchedule::Linear;
        assert!(matches!(s.eval_a(1.5), Err(Error::Domain { .. })));
        assert!(matches!(s.eval_b(-0.1), Err(Error::Domain { .. })));
    }

    #[test]
    fn boundary_conditions_every_kind() {
        let kinds = [
            CoefficientSchedule::Linear,
            CoefficientSchedule::Trigonometric,
            quadratic_b(),
            CoefficientSchedule::Neural(NeuralSchedule::new(16, 3).unwrap()),
        ];
        for s in &kinds {
            assert_eq!(s.eval(0.0).unwrap(), (1.0, 0.0), "{:?}", s.kind());
            assert_eq!(s.eval(1.0).unwrap(), (0.0, 1.0), "{:?}", s.kind());
        }
    }

    #[test]
    fn zeroed_residual_is_the_straight_line() {
        let s = CoefficientSchedule::Neural(NeuralSchedule::zeroed(16, 9).unwrap());
        let grid = GridSpec::new(50).unwrap();
        for &t in &grid.nodes() {
            assert_eq!(s.eval(t).unwrap(), CoefficientSchedule::Linear.eval(t).unwrap());
            assert_eq!(s.pointwise_derivatives(t, 1e-3).unwrap(), (-1.0, 1.0));
            assert_eq!(s.pointwise_second_derivatives(t, 1e-3).unwrap(), (0.0, 0.0));
        }
        assert_eq!(
            s.grid_derivatives(&grid, false).unwrap(),
            CoefficientSchedule::Linear.grid_derivatives(&grid, true).unwrap()
        );
    }

    #[test]
    fn linear_derivatives() {
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(CoefficientSchedule::Linear.pointwise_derivatives(t, 1e-3).unwrap(), (-1.0, 1.0));
        }
        let d = CoefficientSchedule::Linear.grid_derivatives(&GridSpec::new(100).unwrap(), false).unwrap();
        for i in 0..d.len() {
            assert_abs_diff_eq!(d.a_dot[i], -1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(d.b_dot[i], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(d.a_ddot[i], 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(d.b_ddot[i], 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn trigonometric_first_derivative_at_half() {
        let (ad, bd) = CoefficientSchedule::Trigonometric.pointwise_derivatives(0.5, 1e-3).unwrap();
        let expected = -FRAC_PI_2 * (std::f64::consts::FRAC_PI_4).sin();
        assert_abs_diff_eq!(ad, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(ad, -1.110721, epsilon = 1e-6);
        assert_abs_diff_eq!(bd, 1.110721, epsilon = 1e-6);
    }

    #[test]
    fn quadratic_stub_differences_are_exact() {
        let s = quadratic_b();
        let (ad, bd) = s.pointwise_derivatives(0.5, 1e-3).unwrap();
        assert_abs_diff_eq!(bd, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ad, -1.0, epsilon = 1e-12);
        let d = s.grid_derivatives(&GridSpec::new(1000).unwrap(), false).unwrap();
        for &v in &d.b_ddot {
            assert_abs_diff_eq!(v, 2.0, epsilon = 1e-6);
        }
        for (t, v) in d.t.iter().zip(&d.b_dot) {
            assert_abs_diff_eq!(*v, 2.0 * t, epsilon = 1e-10);
        }
    }

    #[test]
    fn one_sided_difference_at_endpoints() {
        let s = quadratic_b();
        // forward difference of t^2 at 0 with step h is exactly h
        let (_, bd) = s.pointwise_derivatives(0.0, 0.01).unwrap();
        assert_abs_diff_eq!(bd, 0.01, epsilon = 1e-14);
        let (_, bd) = s.pointwise_derivatives(1.0, 0.01).unwrap();
        assert_abs_diff_eq!(bd, 1.99, epsilon = 1e-12);
        let (_, bdd) = s.pointwise_second_derivatives(0.0, 0.01).unwrap();
        assert_abs_diff_eq!(bdd, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn trigonometric_second_derivative_on_grid() {
        let d = CoefficientSchedule::Trigonometric
            .grid_derivatives(&GridSpec::new(1000).unwrap(), false)
            .unwrap();
        for (t, v) in d.t.iter().zip(&d.a_ddot) {
            let exact = -FRAC_PI_2 * FRAC_PI_2 * (FRAC_PI_2 * t).cos();
            assert_abs_diff_eq!(*v, exact, epsilon = 1e-4);
        }
    }

    fn trig_grid_error(m: usize) -> f64 {
        let d = CoefficientSchedule::Trigonometric.grid_derivatives(&GridSpec::new(m).unwrap(), false).unwrap();
        let e = CoefficientSchedule::Trigonometric.grid_derivatives(&GridSpec::new(m).unwrap(), true).unwrap();
        [(&d.a_dot, &e.a_dot), (&d.b_dot, &e.b_dot), (&d.a_ddot, &e.a_ddot), (&d.b_ddot, &e.b_ddot)]
            .iter()
            .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn grid_error_is_second_order() {
        for m in [16, 32, 64] {
            let ratio = trig_grid_error(m) / trig_grid_error(4 * m);
            assert!(ratio >= 3.5 * 3.5, "M={m}: ratio {ratio}");
        }
    }

    #[test]
    fn exact_flag_ignored_for_neural() {
        let s = CoefficientSchedule::Neural(NeuralSchedule::new(8, 1).unwrap());
        let grid = GridSpec::new(20).unwrap();
        assert_eq!(s.grid_derivatives(&grid, true).unwrap(), s.grid_derivatives(&grid, false).unwrap());
    }

    #[test]
    fn point_coefficients_match_plain_evaluation() {
        let s = CoefficientSchedule::Neural(NeuralSchedule::new(16, 4).unwrap());
        let ts = [0.0, 1e-5, 0.25, 0.6, 0.9995, 1.0];
        let g = Graph::new();
        let b = g.bind_constant(&s.params());
        let pc = s.point_coefficients(&g, &b, &ts, 1e-3).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let (a, bb) = s.eval(t).unwrap();
            let (ad, bd) = s.pointwise_derivatives(t, 1e-3).unwrap();
            assert_abs_diff_eq!(g.value(pc.a).data()[i], a, epsilon = 1e-15);
            assert_abs_diff_eq!(g.value(pc.b).data()[i], bb, epsilon = 1e-15);
            assert_abs_diff_eq!(g.value(pc.a_dot).data()[i], ad, epsilon = 1e-10);
            assert_abs_diff_eq!(g.value(pc.b_dot).data()[i], bd, epsilon = 1e-10);
        }
    }

    #[test]
    fn polynomial_must_meet_boundaries() {
        assert!(PolynomialSchedule::new(vec![1.0], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn from_params_checks_layout() {
        let s = NeuralSchedule::new(8, 1).unwrap();
        assert!(NeuralSchedule::from_params(16, s.params().clone()).is_err());
        assert_eq!(NeuralSchedule::from_params(8, s.params().clone()).unwrap(), s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn neural_boundaries_hold_for_any_parameters(seed in any::<u64>(), hidden in 1usize..12) {
            let s = CoefficientSchedule::Neural(NeuralSchedule::new(hidden, seed).unwrap());
            prop_assert_eq!(s.eval(0.0).unwrap(), (1.0, 0.0));
            prop_assert_eq!(s.eval(1.0).unwrap(), (0.0, 1.0));
        }
    }
}
