//! Scratch diagnostics: one-step increment fidelity of a checkpoint, on and
//! off the data manifold, in normalized-state units.

use holstein::analysis::{ExactStepper, Stepper};
use holstein::datagen::read_dataset;
use holstein::model::Model;
use holstein::trainer::normalized_state_error;
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (ckpt, dataset_dir) = (&args[1], &args[2]);
    let dataset = read_dataset(Path::new(dataset_dir)).expect("dataset");
    let model = Model::<f32>::load_checkpoint(Path::new(ckpt)).expect("checkpoint");
    let scaling = model.scaling().clone();
    let dt_pred = dataset.protocol.dt_prediction();
    let mut exact = ExactStepper::from_dataset(&dataset).expect("oracle");

    // M1: truth per-step increment; M2: teacher-forced one-step error.
    let (mut m1, mut m2, mut n) = (0.0, 0.0, 0usize);
    for traj in dataset.trajectories.iter().take(8) {
        for t in (0..traj.snapshots.len() - 1).step_by(10) {
            let s = &traj.snapshots[t];
            let s_next = &traj.snapshots[t + 1];
            m1 += normalized_state_error(s_next, s, &scaling);
            let pred = model.predict_step(s, dt_pred).expect("predict");
            m2 += normalized_state_error(&pred, s_next, &scaling);
            n += 1;
        }
    }
    let (m1, m2) = (m1 / n as f64, m2 / n as f64);
    println!("n = {n}");
    println!("M1 truth per-step increment (normalized):  {m1:.5}");
    println!("M2 teacher-forced one-step error:          {m2:.5}");
    println!("M2 / M1:                                   {:.3}", m2 / m1);

    // M3: at self-rollout steps, compare the model's own increment against
    // the exact increment from the model's current (off-manifold) state.
    let traj = &dataset.trajectories[0];
    let roll = model
        .rollout(&traj.snapshots[0], 60, dt_pred)
        .expect("rollout");
    for probe_t in [5usize, 10, 20, 40, 60] {
        let s_hat = &roll[probe_t];
        let model_next = model.predict_step(s_hat, dt_pred).expect("predict");
        let model_inc = normalized_state_error(&model_next, s_hat, &scaling);
        let exact_inc = match exact.step(s_hat) {
            Ok(exact_next) => normalized_state_error(&exact_next, s_hat, &scaling),
            Err(e) => {
                println!("  t={probe_t}: exact step failed: {e}");
                continue;
            }
        };
        // Distance of the rollout state from the true trajectory.
        let drift = normalized_state_error(s_hat, &traj.snapshots[probe_t], &scaling);
        println!(
            "t={probe_t:3}: model increment {model_inc:.5}, exact-from-state increment \
             {exact_inc:.5}, ratio {:.3}, drift from truth {drift:.3}",
            model_inc / exact_inc
        );
    }
}
