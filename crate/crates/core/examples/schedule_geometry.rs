//! Coefficient curves and curvature for the closed-form schedules and a
//! freshly initialized neural one.
//!
//! Writes `coefficients.svg`, `curvature.svg` and one profile CSV per kind.

use std::fs::{self, File};
use std::path::PathBuf;

use curveflow::cli::curvature_pairs;
use curveflow::losses::determinant_integral;
use curveflow::metrics::schedule_diagnostics;
use curveflow::plot::{line_svg, Series, PALETTE};
use curveflow::schedule::NeuralSchedule;
use curveflow::{CoefficientSchedule, GridSpec};

fn main() -> curveflow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/schedule_geometry".into()));
    fs::create_dir_all(&out).expect("output dir");
    let grid = GridSpec::new(200)?;
    let (x0, eps) = curvature_pairs(None, 64, 2, 0);
    let schedules = [
        ("linear", CoefficientSchedule::Linear),
        ("trigonometric", CoefficientSchedule::Trigonometric),
        ("neural", CoefficientSchedule::Neural(NeuralSchedule::new(64, 0)?)),
    ];

    let mut paths = Vec::new();
    let mut kappas = Vec::new();
    for (i, (name, s)) in schedules.iter().enumerate() {
        let (a, b) = s.eval_many(&grid.nodes())?;
        paths.push(Series::new(*name, PALETTE[i], a, b));
        let diag = schedule_diagnostics(s, &grid, &x0, &eps)?;
        diag.write_csv(File::create(out.join(format!("profile_{name}.csv"))).expect("csv")).expect("write");
        println!(
            "{name:>13}: det integral {:.4e}, max mean curvature {:.4}",
            determinant_integral(s, &grid)?,
            diag.max_mean_curvature()
        );
        kappas.push(Series::new(*name, PALETTE[i], diag.t, diag.mean_curvature));
    }
    fs::write(out.join("coefficients.svg"), line_svg("(a(t), b(t))", &paths)).expect("svg");
    fs::write(out.join("curvature.svg"), line_svg("mean curvature over t", &kappas)).expect("svg");
    println!("wrote {}", out.display());
    Ok(())
}
