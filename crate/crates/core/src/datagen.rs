//! Synthetic 2-D datasets and Gaussian noise.
//!
//! All generators are deterministic given their seed. Points are drawn
//! in order from a single stream, so a prefix of a larger draw equals a
//! smaller draw with the same seed.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffengine::Tensor;
use crate::rng::{self, streams, uniform_open, NormalSampler};
use crate::{Error, Result};

/// Radius of the eight-Gaussian ring.
pub const RING_RADIUS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[serde(rename = "gaussians8")]
    Gaussians8,
    TwoMoons,
    Checkerboard,
    Spiral,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [DatasetKind::Gaussians8, DatasetKind::TwoMoons, DatasetKind::Checkerboard, DatasetKind::Spiral];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Gaussians8 => "gaussians8",
            DatasetKind::TwoMoons => "two_moons",
            DatasetKind::Checkerboard => "checkerboard",
            DatasetKind::Spiral => "spiral",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown dataset `{s}`")))
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_noise_std() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub count: usize,
    pub seed: u64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("dataset.count must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("dataset.noise_std must be non-negative"));
        }
        Ok(())
    }
}

/// One point of `kind` before additive noise.
fn draw<R: rand::Rng>(kind: DatasetKind, s: &mut NormalSampler<R>) -> [f64; 2] {
    let mut u = || uniform_open(s.rng_mut());
    match kind {
        DatasetKind::Gaussians8 => {
            let k = ((u() * 8.0) as usize).min(7);
            let angle = 2.0 * PI * k as f64 / 8.0;
            [RING_RADIUS * angle.cos(), RING_RADIUS * angle.sin()]
        }
        DatasetKind::TwoMoons => {
            let theta = PI * u();
            let (x, y) = if u() < 0.5 {
                (theta.cos(), theta.sin())
            } else {
                (1.0 - theta.cos(), 0.5 - theta.sin())
            };
            [2.0 * (x - 0.5), 2.0 * (y - 0.25)]
        }
        DatasetKind::Checkerboard => {
            let x = 4.0 * u() - 2.0;
            let shift = if u() < 0.5 { 0.0 } else { 2.0 };
            let y = u() - shift + x.floor().rem_euclid(2.0);
            [2.0 * x, 2.0 * y]
        }
        DatasetKind::Spiral => {
            let r = u().sqrt() * 3.0 * PI;
            let sign = if u() < 0.5 { 1.0 } else { -1.0 };
            [sign * -r * r.cos() / 3.0, sign * r * r.sin() / 3.0]
        }
    }
}

/// `spec.count` points, one per row.
pub fn generate(spec: &DatasetSpec) -> Result<Tensor> {
    generate_n(spec, spec.count)
}

fn generate_n(spec: &DatasetSpec, count: usize) -> Result<Tensor> {
    spec.validate()?;
    let mut s = NormalSampler::new(rng::stream(spec.seed, streams::DATASET));
    let mut data = Vec::with_capacity(2 * count);
    for _ in 0..count {
        let p = draw(spec.kind, &mut s);
        let nx = s.next();
        let ny = s.next();
        data.push(p[0] + spec.noise_std * nx);
        data.push(p[1] + spec.noise_std * ny);
    }
    Ok(Tensor::new(count, 2, data))
}

/// Draws `2 * count` points; even indices train, odd indices evaluate.
pub fn generate_split(spec: &DatasetSpec) -> Result<(Tensor, Tensor)> {
    let all = generate_n(spec, 2 * spec.count)?;
    let even: Vec<usize> = (0..spec.count).map(|i| 2 * i).collect();
    let odd: Vec<usize> = (0..spec.count).map(|i| 2 * i + 1).collect();
    Ok((all.select_rows(&even), all.select_rows(&odd)))
}

/// Like [`generate_split`], but with `eval_count` held-out points: draws
/// `2 max(count, eval_count)` points and keeps the first `count` even-index
/// and the first `eval_count` odd-index rows.
pub fn generate_train_eval(spec: &DatasetSpec, eval_count: usize) -> Result<(Tensor, Tensor)> {
    if eval_count == 0 {
        return Err(Error::config("held-out count must be positive"));
    }
    let n = spec.count.max(eval_count);
    let all = generate_n(spec, 2 * n)?;
    let even: Vec<usize> = (0..spec.count).map(|i| 2 * i).collect();
    let odd: Vec<usize> = (0..eval_count).map(|i| 2 * i + 1).collect();
    Ok((all.select_rows(&even), all.select_rows(&odd)))
}

/// `count x dim` standard normal draws.
pub fn sample_noise(count: usize, dim: usize, seed: u64) -> Result<Tensor> {
    if dim == 0 {
        return Err(Error::config("noise dimension must be positive"));
    }
    let mut s = NormalSampler::new(rng::stream(seed, streams::NOISE));
    Ok(Tensor::new(count, dim, (0..count * dim).map(|_| s.next()).collect()))
}

/// Writes `x,y,...` rows with a header of `x0..x{d-1}` (or `x,y` in 2-D).
pub fn write_points_csv<W: Write>(points: &Tensor, mut out: W) -> std::io::Result<()> {
    let header: Vec<String> = if points.cols() == 2 {
        vec!["x".into(), "y".into()]
    } else {
        (0..points.cols()).map(|j| format!("x{j}")).collect()
    };
    writeln!(out, "{}", header.join(","))?;
    for row in points.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Reads a file written by [`write_points_csv`].
pub fn read_points_csv(text: &str) -> Result<Tensor> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::config("points file is empty"))?;
    let cols = header.split(',').count();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols {
            return Err(Error::config(format!("line {}: expected {cols} fields", i + 2)));
        }
        for c in cells {
            let v: f64 = c.trim().parse().map_err(|_| Error::config(format!("line {}: bad number `{c}`", i + 2)))?;
            data.push(v);
        }
        rows += 1;
    }
    Ok(Tensor::new(rows, cols, data))
}
