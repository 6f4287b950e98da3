//! A schedule network with zeroed output layers reproduces rectified flow:
//! identical targets, and with the schedule frozen and no regularizer,
//! training is bit-identical to the linear schedule.

use curveflow::datagen::{generate, DatasetKind, DatasetSpec};
use curveflow::schedule::NeuralSchedule;
use curveflow::training::{train, TrainConfig};
use curveflow::trajectory::target_velocity;
use curveflow::{CoefficientSchedule, VelocityField, DEFAULT_STEP};

fn main() -> curveflow::Result<()> {
    let zeroed = CoefficientSchedule::Neural(NeuralSchedule::zeroed(64, 3)?);
    let (x0, eps) = ([1.5, -2.0], [0.3, 0.7]);
    for t in [0.0, 0.25, 0.5, 0.9, 1.0] {
        let u = target_velocity(&zeroed, &x0, &eps, t, DEFAULT_STEP)?;
        println!("t = {t}: target {u:?}");
    }

    let data = generate(&DatasetSpec { kind: DatasetKind::TwoMoons, count: 300, seed: 3, noise_std: 0.1 })?;
    let cfg = TrainConfig { epochs: 3, batch_size: 30, lambda: 0.0, train_schedule: false, seed: 3, ..TrainConfig::default() };
    let v = VelocityField::initialize(2, 3)?;
    let a = train(&cfg, &data, zeroed, v.clone()).expect("training run");
    let b = train(&cfg, &data, CoefficientSchedule::Linear, v).expect("training run");
    let same = a.history == b.history && a.state.velocity.params() == b.state.velocity.params();
    println!("{} steps, histories and weights identical: {same}", a.history.len());
    Ok(())
}
