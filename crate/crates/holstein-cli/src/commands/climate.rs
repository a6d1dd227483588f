//! `holstein climate`: long-horizon climate comparison — pooled
//! order-parameter autocorrelations of stepper rollouts against reference
//! trajectories.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use serde::{Deserialize, Serialize};

use holstein::analysis::{
    climate_report_par, export_traces_csv, ExactStepper, ModelStepper, Trace,
};
use holstein::dynamics::LatticeState;
use holstein::model::Model;

use crate::manifest::{prepare_out_dir, RunManifest};
use crate::CliError;

#[derive(Args)]
pub struct ClimateArgs {
    /// JSON config (bare object or a manifest from an earlier run).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path, or "exact" for the oracle comparison.
    #[arg(long)]
    model: Option<String>,
    /// Dataset directory supplying the reference trajectories.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Which split to evaluate: test, train, or all.
    #[arg(long, value_parser = ["test", "train", "all"])]
    split: Option<String>,
    /// Cap on the number of trajectories.
    #[arg(long)]
    trajectories: Option<usize>,
    /// Rollout horizon in prediction steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Largest autocorrelation lag (must be < --steps).
    #[arg(long)]
    tau_max: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClimateConfig {
    pub model: String,
    pub dataset: Option<PathBuf>,
    pub split: String,
    pub trajectories: Option<usize>,
    pub steps: usize,
    pub tau_max: usize,
    pub out: PathBuf,
}

impl Default for ClimateConfig {
    fn default() -> Self {
        Self {
            model: "exact".to_string(),
            dataset: None,
            split: "test".to_string(),
            trajectories: None,
            steps: 300,
            tau_max: 50,
            out: PathBuf::from("climate"),
        }
    }
}

pub fn run(args: ClimateArgs, jobs: usize) -> Result<(), CliError> {
    let started = Instant::now();
    let mut config: ClimateConfig =
        crate::manifest::resolve_config("climate", args.config.as_deref())?;
    if let Some(v) = args.model {
        config.model = v;
    }
    if let Some(v) = args.dataset {
        config.dataset = Some(v);
    }
    if let Some(v) = args.split {
        config.split = v;
    }
    if let Some(v) = args.trajectories {
        config.trajectories = Some(v);
    }
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.tau_max {
        config.tau_max = v;
    }
    if let Some(v) = args.out {
        config.out = v;
    }
    if config.tau_max >= config.steps {
        return Err(CliError::usage(format!(
            "--tau-max {} must be smaller than --steps {}",
            config.tau_max, config.steps
        )));
    }

    let dataset_dir = config
        .dataset
        .clone()
        .ok_or_else(|| CliError::usage("--dataset is required (flag or config file)"))?;
    let dataset = super::load_dataset(&dataset_dir)?;
    let (train_idx, test_idx) = dataset.split_indices();
    let mut selected: Vec<usize> = match config.split.as_str() {
        "test" => test_idx,
        "train" => train_idx,
        "all" => (0..dataset.trajectories.len()).collect(),
        other => {
            return Err(CliError::usage(format!(
                "unknown split {other:?} (expected test, train, or all)"
            )))
        }
    };
    if let Some(cap) = config.trajectories {
        selected.truncate(cap);
    }
    if selected.is_empty() {
        return Err(CliError::usage(format!(
            "no trajectories in the {:?} split of {}",
            config.split,
            dataset_dir.display()
        )));
    }
    let truth: Vec<&[LatticeState]> = selected
        .iter()
        .map(|&i| dataset.trajectories[i].snapshots.as_slice())
        .collect();

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
        let model = Model::load_checkpoint(&path)?;
        if model.config().l != dataset.l {
            return Err(CliError::usage(format!(
                "checkpoint lattice {} vs dataset lattice {}",
                model.config().l,
                dataset.l
            )));
        }
        Some(model)
    };
    let dt_prediction = dataset.protocol.dt_prediction();
    let report = match &loaded_model {
        None => climate_report_par(
            || ExactStepper::from_dataset(&dataset),
            &truth,
            config.steps,
            config.tau_max,
        )?,
        Some(model) => climate_report_par(
            || Ok(ModelStepper::new(model, dt_prediction)),
            &truth,
            config.steps,
            config.tau_max,
        )?,
    };

    prepare_out_dir(&config.out, args.force)?;
    let report_path = config.out.join("climate.json");
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::integrity(format!("serializing report: {e}")))?;
    std::fs::write(&report_path, text + "\n")?;

    let lags: Vec<f64> = (0..=config.tau_max).map(|t| t as f64).collect();
    let acf_path = config.out.join("acf.csv");
    export_traces_csv(
        &acf_path,
        &lags,
        &[
            Trace {
                name: "acf_rho_truth".into(),
                values: report.acf_rho_truth.clone(),
            },
            Trace {
                name: "acf_rho_model".into(),
                values: report.acf_rho_model.clone(),
            },
            Trace {
                name: "acf_q_truth".into(),
                values: report.acf_q_truth.clone(),
            },
            Trace {
                name: "acf_q_model".into(),
                values: report.acf_q_model.clone(),
            },
        ],
    )?;

    let manifest_path = config.out.join("manifest.json");
    RunManifest::new("climate", &config, jobs)?
        .input("dataset", &dataset_dir)
        .output("report", &report_path)
        .output("acf", &acf_path)
        .write(&manifest_path, started)?;

    println!(
        "climate of {} over {} trajectories ({} divergent), horizon {} steps",
        report.label, report.n_trajectories, report.n_divergent, report.horizon
    );
    println!("  max |acf dev| delta_rho: {:.6}", report.max_dev_rho);
    println!("  max |acf dev| delta_q:   {:.6}", report.max_dev_q);
    println!("  wrote {}", report_path.display());
    println!("  wrote {}", acf_path.display());
    println!("  wrote {}", manifest_path.display());
    Ok(())
}
