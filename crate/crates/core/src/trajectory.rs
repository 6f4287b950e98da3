//! Geometry of the interpolant `z_t = a(t) x0 + b(t) eps`.
//!
//! Because the trajectory lives in the plane spanned by `x0` and `eps`,
//! velocity and acceleration are `a' x0 + b' eps` and `a'' x0 + b'' eps`,
//! their cross product is `(a'b'' - b'a'') (x0 x eps)`, and the curvature
//! factors into a schedule-only determinant and a sample-only cross
//! magnitude.

use crate::schedule::CoefficientSchedule;
use crate::{Error, Result};

/// Squared speeds below this make the curvature denominator meaningless.
pub const DEGENERATE_SPEED_SQUARED: f64 = 1e-18;

fn check_pair(x0: &[f64], eps: &[f64]) -> Result<()> {
    if x0.len() != eps.len() {
        return Err(Error::shape(format!("x0 has {} entries, eps has {}", x0.len(), eps.len())));
    }
    if x0.len() < 2 {
        return Err(Error::shape("trajectories need dimension at least 2"));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn combine(a: f64, x0: &[f64], b: f64, eps: &[f64]) -> Vec<f64> {
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// One `(x0, eps, t)` draw with its interpolant and regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: f64,
    pub z_t: Vec<f64>,
    pub u: Vec<f64>,
}

impl TrajectorySample {
    pub fn new(schedule: &CoefficientSchedule, x0: Vec<f64>, eps: Vec<f64>, t: f64, h: f64) -> Result<Self> {
        let z_t = interpolate(schedule, &x0, &eps, t)?;
        let u = target_velocity(schedule, &x0, &eps, t, h)?;
        Ok(Self { x0, eps, t, z_t, u })
    }
}

/// `a(t) x0 + b(t) eps`.
pub fn interpolate(schedule: &CoefficientSchedule, x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    check_pair(x0, eps)?;
    let (a, b) = schedule.eval(t)?;
    Ok(combine(a, x0, b, eps))
}

/// `a'(t) x0 + b'(t) eps`, the flow-matching regression target.
pub fn target_velocity(schedule: &CoefficientSchedule, x0: &[f64], eps: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
    check_pair(x0, eps)?;
    let (ad, bd) = schedule.pointwise_derivatives(t, h)?;
    Ok(combine(ad, x0, bd, eps))
}

/// `‖x0 × eps‖` in any dimension, via `sqrt(‖x0‖²‖eps‖² - (x0·eps)²)`.
///
/// Panics if the lengths differ.
pub fn cross_magnitude(x0: &[f64], eps: &[f64]) -> f64 {
    assert_eq!(x0.len(), eps.len(), "cross_magnitude: dimension mismatch");
    let gram = dot(x0, x0) * dot(eps, eps) - dot(x0, eps).powi(2);
    gram.max(0.0).sqrt()
}

fn speed_squared_from(ad: f64, bd: f64, x0: &[f64], eps: &[f64]) -> f64 {
    let s = ad * ad * dot(x0, x0) + 2.0 * ad * bd * dot(x0, eps) + bd * bd * dot(eps, eps);
    s.max(0.0)
}

/// `‖z'(t)‖²` expanded in terms of the schedule derivatives.
pub fn speed_squared(schedule: &CoefficientSchedule, x0: &[f64], eps: &[f64], t: f64, h: f64) -> Result<f64> {
    check_pair(x0, eps)?;
    let (ad, bd) = schedule.pointwise_derivatives(t, h)?;
    Ok(speed_squared_from(ad, bd, x0, eps))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvaturePoint {
    pub t: f64,
    /// `a'b'' - b'a''`.
    pub determinant: f64,
    pub cross_magnitude: f64,
    pub speed: f64,
    pub curvature: f64,
}

/// Curvature from already-computed schedule derivatives
/// `[a', b', a'', b'']`.
pub fn curvature_from_derivatives(t: f64, derivs: [f64; 4], x0: &[f64], eps: &[f64]) -> Result<CurvaturePoint> {
    check_pair(x0, eps)?;
    let [ad, bd, add, bdd] = derivs;
    let speed_squared = speed_squared_from(ad, bd, x0, eps);
    if speed_squared < DEGENERATE_SPEED_SQUARED {
        return Err(Error::DegenerateTrajectory { t, speed_squared });
    }
    let determinant = ad * bdd - bd * add;
    let cross = cross_magnitude(x0, eps);
    let speed = speed_squared.sqrt();
    Ok(CurvaturePoint {
        t,
        determinant,
        cross_magnitude: cross,
        speed,
        curvature: determinant.abs() * cross / (speed_squared * speed),
    })
}

/// `|a'b'' - b'a''| ‖x0 × eps‖ / ‖z'‖³`.
pub fn curvature(schedule: &CoefficientSchedule, x0: &[f64], eps: &[f64], t: f64, h: f64) -> Result<CurvaturePoint> {
    check_pair(x0, eps)?;
    let (ad, bd) = schedule.pointwise_derivatives(t, h)?;
    let (add, bdd) = schedule.pointwise_second_derivatives(t, h)?;
    curvature_from_derivatives(t, [ad, bd, add, bdd], x0, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::schedule::NeuralSchedule;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::FRAC_PI_2;

    const H: f64 = 1e-3;

    #[test]
    fn interpolation_endpoints() {
        let s = CoefficientSchedule::Neural(NeuralSchedule::new(16, 2).unwrap());
        let (x0, eps) = ([0.3, -1.2, 4.0], [2.0, 0.5, -0.1]);
        assert_eq!(interpolate(&s, &x0, &eps, 0.0).unwrap(), x0.to_vec());
        assert_eq!(interpolate(&s, &x0, &eps, 1.0).unwrap(), eps.to_vec());
        assert_eq!(interpolate(&CoefficientSchedule::Linear, &[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn shape_errors() {
        let s = CoefficientSchedule::Linear;
        assert!(matches!(interpolate(&s, &[1.0, 2.0], &[1.0], 0.5), Err(Error::Shape(_))));
        assert!(matches!(target_velocity(&s, &[1.0], &[1.0], 0.5, H), Err(Error::Shape(_))));
    }

    #[test]
    fn target_velocity_cases() {
        let lin = CoefficientSchedule::Linear;
        assert_eq!(target_velocity(&lin, &[1.0, 2.0], &[-3.0, 0.5], 0.7, H).unwrap(), vec![-4.0, -1.5]);
        let u = target_velocity(&CoefficientSchedule::Trigonometric, &[1.0, 0.0], &[0.0, 1.0], 0.5, H).unwrap();
        assert_abs_diff_eq!(u[0], -1.110721, epsilon = 1e-6);
        assert_abs_diff_eq!(u[1], 1.110721, epsilon = 1e-6);
        assert_eq!(target_velocity(&lin, &[2.0, 3.0], &[2.0, 3.0], 0.2, H).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn cross_magnitude_cases() {
        assert_eq!(cross_magnitude(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(cross_magnitude(&[1.0, -2.0], &[2.0, -4.0]), 0.0);
        assert_abs_diff_eq!(cross_magnitude(&[1.0, 2.0], &[3.0, 4.0]), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn speed_cases() {
        let lin = CoefficientSchedule::Linear;
        for t in [0.0, 0.4, 1.0] {
            assert_abs_diff_eq!(speed_squared(&lin, &[1.0, 2.0], &[3.0, -1.0], t, H).unwrap(), 13.0, epsilon = 1e-12);
        }
        let trig = CoefficientSchedule::Trigonometric;
        for t in [0.0, 0.3, 0.77, 1.0] {
            assert_abs_diff_eq!(speed_squared(&trig, &[1.0, 0.0], &[0.0, 1.0], t, H).unwrap(), FRAC_PI_2.powi(2), epsilon = 1e-12);
        }
        assert_eq!(speed_squared(&lin, &[1.5, 1.5], &[1.5, 1.5], 0.5, H).unwrap(), 0.0);
    }

    #[test]
    fn quarter_circle_has_unit_curvature() {
        for t in [0.0, 0.1, 0.5, 0.9, 1.0] {
            let p = curvature(&CoefficientSchedule::Trigonometric, &[1.0, 0.0], &[0.0, 1.0], t, H).unwrap();
            assert_abs_diff_eq!(p.determinant, FRAC_PI_2.powi(3), epsilon = 1e-12);
            assert_abs_diff_eq!(p.curvature, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_pair_is_reported() {
        let err = curvature(&CoefficientSchedule::Linear, &[1.0, 1.0], &[1.0, 1.0], 0.5, H).unwrap_err();
        assert!(matches!(err, Error::DegenerateTrajectory { .. }));
        // parallel but distinct endpoints move, so curvature is simply zero
        let p = curvature(&CoefficientSchedule::Linear, &[1.0, 1.0], &[2.0, 2.0], 0.5, H).unwrap();
        assert_eq!(p.curvature, 0.0);
        assert_abs_diff_eq!(p.speed * p.speed, 2.0, epsilon = 1e-15);
    }

    fn random_vec(r: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.gen_range(-3.0..3.0)).collect()
    }

    #[test]
    fn straight_lines_have_zero_curvature() {
        let mut r = rng::stream(21, 0);
        for _ in 0..1000 {
            let n = r.gen_range(2..=8);
            let (x0, eps) = (random_vec(&mut r, n), random_vec(&mut r, n));
            let t = r.gen_range(0.0..=1.0);
            let p = curvature(&CoefficientSchedule::Linear, &x0, &eps, t, H).unwrap();
            assert!(p.curvature.abs() <= 1e-9);
        }
    }

    proptest! {
        #[test]
        fn curvature_point_is_self_consistent(seed in 0u64..500, t in 0.0f64..=1.0) {
            let mut r = rng::stream(seed, 1);
            let n = r.gen_range(2..=6);
            let (x0, eps) = (random_vec(&mut r, n), random_vec(&mut r, n));
            let s = CoefficientSchedule::Neural(NeuralSchedule::new(8, seed).unwrap());
            if let Ok(p) = curvature(&s, &x0, &eps, t, H) {
                let rebuilt = p.determinant.abs() * p.cross_magnitude / p.speed.powi(3);
                prop_assert!((rebuilt - p.curvature).abs() <= 1e-12 * p.curvature.abs().max(1e-300));
                prop_assert!(p.curvature >= 0.0 && p.speed >= 0.0);
            }
        }

        #[test]
        fn cross_magnitude_symmetry_and_shear(seed in 0u64..1000, c in -5.0f64..5.0) {
            let mut r = rng::stream(seed, 2);
            let n = r.gen_range(2..=8);
            let (x0, eps) = (random_vec(&mut r, n), random_vec(&mut r, n));
            let sheared: Vec<f64> = eps.iter().zip(&x0).map(|(e, x)| e + c * x).collect();
            let base = cross_magnitude(&x0, &eps);
            prop_assert!((base - cross_magnitude(&eps, &x0)).abs() <= 1e-9);
            prop_assert!((base - cross_magnitude(&x0, &sheared)).abs() <= 1e-9 * (1.0 + base));
        }

        #[test]
        fn scaling_endpoints_scales_curvature_inversely(seed in 0u64..500, s in 0.1f64..10.0, t in 0.0f64..=1.0) {
            let mut r = rng::stream(seed, 3);
            let n = r.gen_range(2..=5);
            let (x0, eps) = (random_vec(&mut r, n), random_vec(&mut r, n));
            let trig = CoefficientSchedule::Trigonometric;
            let base = curvature(&trig, &x0, &eps, t, H).unwrap().curvature;
            let xs: Vec<f64> = x0.iter().map(|v| v * s).collect();
            let es: Vec<f64> = eps.iter().map(|v| v * s).collect();
            let scaled = curvature(&trig, &xs, &es, t, H).unwrap().curvature;
            prop_assert!((scaled - base / s).abs() <= 1e-6 * (base / s).max(1e-12));
        }
    }
}
