//! Every toy dataset as CSV plus one scatter plot.

use std::fs::{self, File};
use std::path::PathBuf;

use curveflow::datagen::{generate, write_points_csv, DatasetKind, DatasetSpec};
use curveflow::plot::{scatter_svg, Series, PALETTE};

fn main() -> curveflow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/datasets".into()));
    fs::create_dir_all(&out).expect("output dir");
    let mut series = Vec::new();
    for (i, kind) in DatasetKind::ALL.into_iter().enumerate() {
        let points = generate(&DatasetSpec { kind, count: 2000, seed: 0, noise_std: 0.1 })?;
        write_points_csv(&points, File::create(out.join(format!("{}.csv", kind.name()))).expect("csv")).expect("write");
        // Offset each set so the panels do not overlap.
        let shift = 12.0 * i as f64;
        let xs = points.row_iter().map(|r| r[0] + shift).collect();
        let ys = points.row_iter().map(|r| r[1]).collect();
        series.push(Series::new(kind.name(), PALETTE[i], xs, ys));
        println!("{}: {} points", kind.name(), points.rows());
    }
    fs::write(out.join("datasets.svg"), scatter_svg("toy datasets", &series)).expect("svg");
    Ok(())
}
