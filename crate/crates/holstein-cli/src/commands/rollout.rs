//! `holstein rollout`: advance a stored state with a trained surrogate (or
//! the exact oracle), writing the predicted trajectory and order-parameter
//! traces.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use serde::{Deserialize, Serialize};

use holstein::analysis::{
    export_traces_csv, order_param_q, order_param_rho, AnalysisError, ExactStepper, ModelStepper,
    Stepper, Trace,
};
use holstein::container::{write_trajectory_blob, TrajectoryBlob};
use holstein::datagen::{compute_scaling_coefficients, state_to_raw, Dataset};
use holstein::dynamics::LatticeState;
use holstein::model::Model;
use holstein::trainer::normalized_state_error;

use crate::manifest::{prepare_out_dir, RunManifest};
use crate::CliError;

#[derive(Args)]
pub struct RolloutArgs {
    /// JSON config (bare object or a manifest from an earlier run).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path, or "exact" for the reference integrator.
    #[arg(long)]
    model: Option<String>,
    /// Dataset directory supplying the initial state and ground truth.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Trajectory index (default: the first test trajectory).
    #[arg(long)]
    trajectory: Option<usize>,
    /// Snapshot index to start from.
    #[arg(long)]
    start: Option<usize>,
    /// Prediction steps to take.
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub model: String,
    pub dataset: Option<PathBuf>,
    pub trajectory: Option<usize>,
    pub start: usize,
    pub steps: usize,
    pub out: PathBuf,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            model: "exact".to_string(),
            dataset: None,
            trajectory: None,
            start: 0,
            steps: 100,
            out: PathBuf::from("rollout"),
        }
    }
}

/// Pick the trajectory: an explicit index, else the first test trajectory,
/// else index 0.
fn pick_trajectory(dataset: &Dataset, explicit: Option<usize>) -> Result<usize, CliError> {
    match explicit {
        Some(i) if i < dataset.trajectories.len() => Ok(i),
        Some(i) => Err(CliError::usage(format!(
            "--trajectory {i} out of range (dataset holds {})",
            dataset.trajectories.len()
        ))),
        None => Ok(dataset.split_indices().1.first().copied().unwrap_or(0)),
    }
}

pub fn run(args: RolloutArgs, jobs: usize) -> Result<(), CliError> {
    let started = Instant::now();
    let mut config: RolloutConfig =
        crate::manifest::resolve_config("rollout", args.config.as_deref())?;
    if let Some(v) = args.model {
        config.model = v;
    }
    if let Some(v) = args.dataset {
        config.dataset = Some(v);
    }
    if let Some(v) = args.trajectory {
        config.trajectory = Some(v);
    }
    if let Some(v) = args.start {
        config.start = v;
    }
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.out {
        config.out = v;
    }
    if config.steps == 0 {
        return Err(CliError::usage("--steps must be at least 1"));
    }

    let dataset_dir = config
        .dataset
        .clone()
        .ok_or_else(|| CliError::usage("--dataset is required (flag or config file)"))?;
    let dataset = super::load_dataset(&dataset_dir)?;
    let traj_index = pick_trajectory(&dataset, config.trajectory)?;
    let truth = &dataset.trajectories[traj_index].snapshots;
    if config.start >= truth.len() {
        return Err(CliError::usage(format!(
            "--start {} out of range (trajectory holds {} snapshots)",
            config.start,
            truth.len()
        )));
    }
    let initial = &truth[config.start];
    let dt_prediction = dataset.protocol.dt_prediction();

    // Keep the checkpointed model alive for the stepper's whole lifetime.
    let loaded_model: Option<Model<f32>> = if config.model == "exact" {
        None
    } else {
        let path = PathBuf::from(&config.model);
        if !path.exists() {
            return Err(CliError::usage(format!(
                "checkpoint {} does not exist (or pass --model exact)",
                path.display()
            )));
        }
        Some(Model::load_checkpoint(&path)?)
    };
    let mut stepper: Box<dyn Stepper> = match &loaded_model {
        None => Box::new(ExactStepper::from_dataset(&dataset)?),
        Some(model) => {
            if model.config().l != dataset.l {
                return Err(CliError::usage(format!(
                    "checkpoint lattice {} vs dataset lattice {}",
                    model.config().l,
                    dataset.l
                )));
            }
            Box::new(ModelStepper::new(model, dt_prediction))
        }
    };

    let mut states: Vec<LatticeState> = Vec::with_capacity(config.steps + 1);
    states.push(initial.clone());
    for step in 1..=config.steps {
        match stepper.step(states.last().expect("non-empty")) {
            Ok(next) => states.push(next),
            Err(AnalysisError::Divergent) => {
                return Err(CliError::integrity(format!(
                    "rollout diverged (non-finite state) at step {step}"
                )));
            }
            Err(e) => return Err(e.into()),
        }
    }

    prepare_out_dir(&config.out, args.force)?;
    let blob = TrajectoryBlob {
        l: dataset.l,
        snapshots: states.iter().map(state_to_raw).collect(),
        midpoints: Vec::new(),
    };
    let prediction_path = config.out.join("prediction.bin");
    write_trajectory_blob(&prediction_path, &blob)?;

    // Order-parameter traces; ground-truth columns where truth reaches.
    let times: Vec<f64> = states.iter().map(|s| s.time).collect();
    let mut traces = vec![
        Trace {
            name: "delta_rho_pred".into(),
            values: states.iter().map(order_param_rho).collect(),
        },
        Trace {
            name: "delta_q_pred".into(),
            values: states.iter().map(order_param_q).collect(),
        },
    ];
    let truth_available = truth.len() > config.start + config.steps;
    if truth_available {
        let reference = &truth[config.start..=config.start + config.steps];
        traces.push(Trace {
            name: "delta_rho_truth".into(),
            values: reference.iter().map(order_param_rho).collect(),
        });
        traces.push(Trace {
            name: "delta_q_truth".into(),
            values: reference.iter().map(order_param_q).collect(),
        });
    }
    let traces_path = config.out.join("traces.csv");
    export_traces_csv(&traces_path, &times, &traces)?;

    let manifest_path = config.out.join("manifest.json");
    RunManifest::new("rollout", &config, jobs)?
        .input("dataset", &dataset_dir)
        .output("prediction", &prediction_path)
        .output("traces", &traces_path)
        .write(&manifest_path, started)?;

    println!(
        "rolled {} steps from trajectory {traj_index} snapshot {} with {}",
        config.steps,
        config.start,
        stepper.label()
    );
    println!("  emitted {} states", states.len());
    if truth_available {
        let scaling = compute_scaling_coefficients(&dataset)?;
        let final_err = normalized_state_error(
            states.last().expect("non-empty"),
            &truth[config.start + config.steps],
            &scaling,
        );
        println!("  final normalized state error vs ground truth: {final_err:.6}");
    }
    println!("  wrote {}", prediction_path.display());
    println!("  wrote {}", traces_path.display());
    println!("  wrote {}", manifest_path.display());
    Ok(())
}
