//! Autodiff against central differences on random small instances.
//!
//! ```text
//! cargo run --release --example gradcheck -- [seeds]
//! ```

use curveflow::cli::{run_gradcheck, GRADCHECK_TOLERANCE};

fn main() -> curveflow::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map_or(5, |s| s.parse().expect("seed count"));
    for seed in 0..seeds {
        let r = run_gradcheck(seed, false)?;
        println!(
            "seed {seed}: max rel err {:.2e} ({}[{}]) over {} params, groups {:?}",
            r.max_relative_error, r.worst_parameter, r.worst_index, r.parameters, r.groups
        );
        assert!(r.max_relative_error < GRADCHECK_TOLERANCE);
    }
    let bad = run_gradcheck(0, true)?;
    println!("corrupted control: max rel err {:.2e} at {}", bad.max_relative_error, bad.worst_parameter);
    Ok(())
}
