//! Loads a checkpoint (for instance from the `train_gaussians` example),
//! draws samples with both solvers and scores them against held-out data.
//!
//! ```text
//! cargo run --release --example sample_and_score -- out/train_gaussians/checkpoint.json
//! ```

use std::fs;
use std::path::PathBuf;

use curveflow::cli::load_checkpoint;
use curveflow::metrics::{energy_distance_capped, sliced_wasserstein, MAX_PAIRWISE_POINTS};
use curveflow::plot::{scatter_svg, Series, PALETTE};
use curveflow::sampling::{sample_batch, SolverConfig, SolverMethod};

fn main() -> curveflow::Result<()> {
    let path = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/train_gaussians/checkpoint.json".into()));
    let ck = load_checkpoint(&path)?;
    let velocity = ck.velocity()?;
    let (_, held_out) = ck.config.data()?;
    let held_out = held_out.slice_rows(0, held_out.rows().min(2000));

    let mut series = vec![Series::new("held-out", "#999999", held_out.row_iter().map(|r| r[0]).collect(), held_out.row_iter().map(|r| r[1]).collect())];
    for (i, (method, steps)) in [(SolverMethod::Euler, 20), (SolverMethod::Heun, 20), (SolverMethod::Heun, 50)].into_iter().enumerate() {
        let samples = sample_batch(&velocity, held_out.rows(), 2, 1, &SolverConfig { method, steps })?;
        let ed = energy_distance_capped(&samples, &held_out, MAX_PAIRWISE_POINTS, 0)?.value;
        let sw = sliced_wasserstein(&samples, &held_out, 128, 0)?;
        println!("{method} x{steps}: energy {ed:.4}, sliced-W1 {sw:.4}");
        let label = format!("{method} x{steps}");
        series.push(Series::new(label, PALETTE[i], samples.row_iter().map(|r| r[0]).collect(), samples.row_iter().map(|r| r[1]).collect()));
    }
    let svg = path.with_file_name("sample_and_score.svg");
    fs::write(&svg, scatter_svg("samples vs held-out", &series)).expect("svg");
    println!("wrote {}", svg.display());
    Ok(())
}
