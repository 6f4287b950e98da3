//! Sample-quality metrics and schedule diagnostics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffengine::Tensor;
use crate::losses::{determinant_integral, determinant_profile};
use crate::rng::{self, streams, NormalSampler};
use crate::schedule::{CoefficientSchedule, GridSpec};
use crate::trajectory::curvature_from_derivatives;
use crate::{Error, Result};

/// Sets larger than this are subsampled before the pairwise energy sums.
pub const MAX_PAIRWISE_POINTS: usize = 5000;

pub const DEFAULT_PROJECTIONS: usize = 128;

fn check_sets(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::config("metric inputs must be non-empty"));
    }
    if a.cols() != b.cols() {
        return Err(Error::shape(format!("point dimensions differ: {} vs {}", a.cols(), b.cols())));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFiniteInput("metric input contains NaN or infinity".into()));
    }
    Ok(())
}

fn mean_pairwise(a: &Tensor, b: &Tensor) -> f64 {
    let mut total = 0.0;
    for x in a.row_iter() {
        let mut row = 0.0;
        for y in b.row_iter() {
            row += x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        }
        total += row;
    }
    total / (a.rows() * b.rows()) as f64
}

/// V-statistic energy distance `2 E‖X-Y‖ - E‖X-X'‖ - E‖Y-Y'‖`, clamped at
/// zero, over all points.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_sets(a, b)?;
    let cross = mean_pairwise(a, b);
    let within_a = mean_pairwise(a, a);
    let within_b = mean_pairwise(b, b);
    Ok((2.0 * cross - within_a - within_b).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimate {
    pub value: f64,
    pub subsampled: bool,
}

fn subsample(points: &Tensor, cap: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    let mut idx = rand::seq::index::sample(rng, points.rows(), cap).into_vec();
    idx.sort_unstable();
    points.select_rows(&idx)
}

/// [`energy_distance`] with each set reduced to at most `cap` points by a
/// seeded draw without replacement.
pub fn energy_distance_capped(a: &Tensor, b: &Tensor, cap: usize, seed: u64) -> Result<EnergyEstimate> {
    check_sets(a, b)?;
    if cap == 0 {
        return Err(Error::config("subsample cap must be positive"));
    }
    if a.rows() <= cap && b.rows() <= cap {
        return Ok(EnergyEstimate { value: energy_distance(a, b)?, subsampled: false });
    }
    let mut r = rng::stream(seed, streams::SUBSAMPLE);
    let a = if a.rows() > cap { subsample(a, cap, &mut r) } else { a.clone() };
    let b = if b.rows() > cap { subsample(b, cap, &mut r) } else { b.clone() };
    Ok(EnergyEstimate { value: energy_distance(&a, &b)?, subsampled: true })
}

/// Exact W1 between two equal-size empirical measures on the line.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("1-D sets must be equal and non-empty, got {} and {}", a.len(), b.len())));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// `count` directions drawn uniformly on the unit sphere in `dim`
/// dimensions.
pub fn random_directions(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut s = NormalSampler::new(rng::stream(seed, streams::PROJECTIONS));
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v: Vec<f64> = (0..dim).map(|_| s.next()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

/// Mean 1-D W1 over the projections of both sets onto `directions`.
pub fn sliced_wasserstein_along(a: &Tensor, b: &Tensor, directions: &[Vec<f64>]) -> Result<f64> {
    check_sets(a, b)?;
    if a.rows() != b.rows() {
        return Err(Error::shape(format!(
            "sliced Wasserstein needs equal set sizes, got {} and {}",
            a.rows(),
            b.rows()
        )));
    }
    if directions.is_empty() {
        return Err(Error::config("at least one projection is required"));
    }
    let project = |p: &Tensor, d: &[f64]| -> Vec<f64> { p.row_iter().map(|r| r.iter().zip(d).map(|(x, y)| x * y).sum()).collect() };
    let mut total = 0.0;
    for d in directions {
        if d.len() != a.cols() {
            return Err(Error::shape("projection dimension differs from point dimension"));
        }
        total += wasserstein_1d(&project(a, d), &project(b, d))?;
    }
    Ok(total / directions.len() as f64)
}

/// Sliced W1 with `projections` seeded random directions.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, projections: usize, seed: u64) -> Result<f64> {
    check_sets(a, b)?;
    sliced_wasserstein_along(a, b, &random_directions(projections, a.cols(), seed))
}

/// Grid-level view of a schedule: the determinant integral and the mean
/// curvature over a set of `(x0, eps)` pairs at each interior node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDiagnostics {
    pub determinant_integral: f64,
    pub t: Vec<f64>,
    pub determinant: Vec<f64>,
    pub mean_curvature: Vec<f64>,
    /// Pairs excluded from the mean at one or more nodes.
    pub degenerate_pairs: usize,
}

impl ScheduleDiagnostics {
    pub fn max_mean_curvature(&self) -> f64 {
        self.mean_curvature.iter().cloned().fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,mean_kappa,det")?;
        for i in 0..self.t.len() {
            writeln!(out, "{},{},{}", self.t[i], self.mean_curvature[i], self.determinant[i])?;
        }
        Ok(())
    }
}

/// Finite-difference diagnostics on `grid`. Degenerate pairs are left out
/// of a node's mean; a node where every pair is degenerate is an error.
pub fn schedule_diagnostics(schedule: &CoefficientSchedule, grid: &GridSpec, x0: &Tensor, eps: &Tensor) -> Result<ScheduleDiagnostics> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("x0 and eps sets must have the same shape"));
    }
    if x0.rows() == 0 {
        return Err(Error::config("diagnostics need at least one pair"));
    }
    let deriv = schedule.grid_derivatives(grid, false)?;
    let determinant = determinant_profile(&deriv);
    let mut mean_curvature = Vec::with_capacity(deriv.len());
    let mut degenerate = vec![false; x0.rows()];
    for i in 0..deriv.len() {
        let derivs = [deriv.a_dot[i], deriv.b_dot[i], deriv.a_ddot[i], deriv.b_ddot[i]];
        let mut sum = 0.0;
        let mut used = 0usize;
        for (k, (x, e)) in x0.row_iter().zip(eps.row_iter()).enumerate() {
            match curvature_from_derivatives(deriv.t[i], derivs, x, e) {
                Ok(p) => {
                    sum += p.curvature;
                    used += 1;
                }
                Err(Error::DegenerateTrajectory { .. }) => degenerate[k] = true,
                Err(e) => return Err(e),
            }
        }
        if used == 0 {
            return Err(Error::Diagnostic(format!("every pair is degenerate at t = {}", deriv.t[i])));
        }
        mean_curvature.push(sum / used as f64);
    }
    Ok(ScheduleDiagnostics {
        determinant_integral: determinant_integral(schedule, grid)?,
        t: deriv.t,
        determinant,
        mean_curvature,
        degenerate_pairs: degenerate.iter().filter(|&&d| d).count(),
    })
}

/// Scores for one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub energy_distance: f64,
    pub sliced_wasserstein: f64,
    pub determinant_integral: f64,
    pub max_mean_curvature: f64,
    pub subsampled: bool,
}
