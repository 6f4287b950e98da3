//! Jointly trains the velocity network and the neural schedule on the
//! eight-Gaussian ring and saves a checkpoint plus the loss history.
//!
//! ```text
//! cargo run --release --example train_gaussians -- [out_dir] [epochs]
//! ```

use std::fs::{self, File};
use std::path::PathBuf;

use curveflow::cli::{save_checkpoint, train_models, write_history_csv, Checkpoint, ExperimentConfig};
use curveflow::datagen::{DatasetKind, DatasetSpec};
use curveflow::losses::determinant_integral;
use curveflow::plot::{line_svg, Series, PALETTE};
use curveflow::training::TrainError;

fn main() -> curveflow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/train_gaussians".into()));
    let epochs = args.next().map_or(20, |s| s.parse().expect("epochs"));
    fs::create_dir_all(&out).expect("output dir");

    let mut config = ExperimentConfig::new(DatasetSpec { kind: DatasetKind::Gaussians8, count: 2000, seed: 0, noise_std: 0.1 });
    config.train.epochs = epochs;
    config.train.batch_size = 100;
    config.train.base_lr = 3e-3;
    config.output_dir = out.clone();
    let (train_rows, _) = config.data()?;

    let outcome = match train_models(&config, &train_rows) {
        Ok(o) => o,
        Err(TrainError::Invalid(e)) => return Err(e),
        Err(TrainError::Diverged { step, reason, .. }) => panic!("diverged at step {step}: {reason}"),
    };
    let last = outcome.history.last().expect("at least one step");
    println!(
        "{} steps, final fm {:.4}, curvature term {:.3e}, det integral {:.3e}",
        outcome.state.step,
        last.fm_loss,
        last.curvature_loss,
        determinant_integral(&outcome.state.schedule, &config.grid())?
    );

    save_checkpoint(&out.join("checkpoint.json"), &Checkpoint::from_state(&config, &outcome.state)?)?;
    write_history_csv(&outcome.history, File::create(out.join("history.csv")).expect("csv")).expect("write");
    let steps: Vec<f64> = outcome.history.iter().map(|r| r.step as f64).collect();
    let fm: Vec<f64> = outcome.history.iter().map(|r| r.fm_loss).collect();
    fs::write(out.join("history.svg"), line_svg("fm loss", &[Series::new("fm", PALETTE[0], steps, fm)])).expect("svg");
    println!("wrote {}", out.display());
    Ok(())
}
