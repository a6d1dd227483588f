//! Scratch experiment: fine-tune a trained checkpoint with long-rollout
//! curriculum stages only, to probe long-horizon climate behaviour.

use holstein::datagen::read_dataset;
use holstein::model::Model;
use holstein::trainer::{train, CurriculumStage, TrainingConfig};
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (ckpt_in, dataset_dir, ckpt_out) = (&args[1], &args[2], &args[3]);
    let dataset = read_dataset(Path::new(dataset_dir)).expect("dataset");
    let mut model = Model::<f32>::load_checkpoint(Path::new(ckpt_in)).expect("checkpoint");
    let noise: f64 = args[4].parse().expect("noise");
    let config = TrainingConfig {
        stages: vec![CurriculumStage { rollout_steps: 8, noise_sigma: noise, n_epochs: 1 }],
        steps_per_epoch: Some(150),
        warmup_steps: 50,
        ..TrainingConfig::default()
    };
    let report = train(&mut model, &dataset, &config).expect("train");
    for (i, v) in report.stage_validation.iter().enumerate() {
        println!("stage {i}: validation {v:.6}");
    }
    println!("best stage {}", report.best_stage);
    std::fs::create_dir_all(Path::new(ckpt_out).parent().unwrap()).unwrap();
    model.save_checkpoint(Path::new(ckpt_out)).expect("save");
    println!("saved {ckpt_out}");
}
