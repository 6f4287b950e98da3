//! Rectified-flow baselines against the learned schedule at several
//! regularizer weights, on a reduced budget. Writes `results.csv`.
//!
//! ```text
//! cargo run --release --example lambda_ablation -- [out_dir] [epochs]
//! ```

use std::fs;
use std::path::PathBuf;

use curveflow::cli::{run_compare, ExperimentConfig, RESULTS_HEADER};
use curveflow::datagen::{DatasetKind, DatasetSpec};

fn main() -> curveflow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/lambda_ablation".into()));
    let epochs = args.next().map_or(10, |s| s.parse().expect("epochs"));
    fs::create_dir_all(&out).expect("output dir");

    let mut config = ExperimentConfig::new(DatasetSpec { kind: DatasetKind::Gaussians8, count: 1000, seed: 0, noise_std: 0.1 });
    config.train.epochs = epochs;
    config.train.batch_size = 100;
    config.train.base_lr = 3e-3;
    config.metrics.eval_count = Some(2000);
    config.lambda_grid = vec![0.0, 0.01, 1.0];

    let mut csv = format!("{RESULTS_HEADER}\n");
    println!("{:<22} {:>10} {:>10} {:>12}", "variant", "energy", "sliced-W1", "det integral");
    run_compare(&config, &out, |row| {
        println!(
            "{:<22} {:>10.4} {:>10.4} {:>12.3e}",
            row.variant, row.report.energy_distance, row.report.sliced_wasserstein, row.report.determinant_integral
        );
        csv.push_str(&row.csv_row());
        csv.push('\n');
        Ok(())
    })?;
    fs::write(out.join("results.csv"), csv).expect("csv");
    Ok(())
}
