//! Observed order of the Euler and Heun integrators on dz/dt = z, where
//! integrating from t = 1 to 0 gives exp(-1).

use curveflow::sampling::{integrate, FnField, SolverConfig, SolverMethod};
use curveflow::Tensor;

fn main() -> curveflow::Result<()> {
    let field = FnField(|z: &Tensor, _t: f64| z.clone());
    let exact = (-1.0f64).exp();
    println!("{:>6} {:>12} {:>12}", "steps", "euler err", "heun err");
    let mut prev: Option<(f64, f64)> = None;
    for steps in [10, 20, 40, 80, 160, 320] {
        let err = |method| -> curveflow::Result<f64> {
            Ok((integrate(&field, &[1.0], &SolverConfig { method, steps })?[0] - exact).abs())
        };
        let (e, h) = (err(SolverMethod::Euler)?, err(SolverMethod::Heun)?);
        match prev {
            Some((pe, ph)) => println!("{steps:>6} {e:>12.3e} {h:>12.3e}   order {:.2} / {:.2}", (pe / e).log2(), (ph / h).log2()),
            None => println!("{steps:>6} {e:>12.3e} {h:>12.3e}"),
        }
        prev = Some((e, h));
    }
    Ok(())
}
