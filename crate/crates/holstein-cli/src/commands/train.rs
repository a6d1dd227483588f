//! `holstein train`: train a surrogate on a dataset directory, writing a
//! checkpoint, a metrics CSV, and the run manifest.
//!
//! Training runs single-threaded and is bitwise deterministic for a fixed
//! seed; `--jobs` has no effect here.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use serde::{Deserialize, Serialize};

use holstein::datagen::compute_scaling_coefficients;
use holstein::model::{Model, ModelConfig, ModelVariant};
use holstein::trainer::{train, write_metrics_csv, CurriculumStage, TrainingConfig};

use crate::manifest::{prepare_out_dir, RunManifest};
use crate::CliError;

#[derive(Args)]
pub struct TrainArgs {
    /// JSON config (bare object or a manifest from an earlier run).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (required here or in the config file).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Architecture: "standard" (one CNN) or "parc" (differentiator +
    /// integrator).
    #[arg(long, value_parser = ["standard", "parc"])]
    variant: Option<String>,
    /// Hidden channels of each CNN.
    #[arg(long)]
    hidden: Option<usize>,
    /// Residual blocks per CNN.
    #[arg(long)]
    blocks: Option<usize>,
    /// Channel-dropout probability inside residual blocks.
    #[arg(long)]
    dropout: Option<f64>,
    /// Weight-initialization seed.
    #[arg(long)]
    model_seed: Option<u64>,
    /// Keep only the first this-many stages of the curriculum.
    #[arg(long)]
    stages: Option<usize>,
    /// Epochs per curriculum stage (rebuilds the default curriculum).
    #[arg(long)]
    epochs_per_stage: Option<usize>,
    /// Cap on optimizer steps per epoch.
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    /// Training seed (batch sampling, noise, dropout).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoint.bin, metrics.csv, manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCliConfig {
    pub dataset: Option<PathBuf>,
    pub variant: String,
    pub hidden: Option<usize>,
    pub blocks: Option<usize>,
    pub dropout: Option<f64>,
    pub model_seed: u64,
    pub training: TrainingConfig,
    pub out: PathBuf,
}

impl Default for TrainCliConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            variant: "standard".to_string(),
            hidden: None,
            blocks: None,
            dropout: None,
            model_seed: 7,
            training: TrainingConfig::default(),
            out: PathBuf::from("run"),
        }
    }
}

pub fn run(args: TrainArgs, jobs: usize) -> Result<(), CliError> {
    let started = Instant::now();
    let mut config: TrainCliConfig =
        crate::manifest::resolve_config("train", args.config.as_deref())?;
    if let Some(v) = args.dataset {
        config.dataset = Some(v);
    }
    if let Some(v) = args.variant {
        config.variant = v;
    }
    if let Some(v) = args.hidden {
        config.hidden = Some(v);
    }
    if let Some(v) = args.blocks {
        config.blocks = Some(v);
    }
    if let Some(v) = args.dropout {
        config.dropout = Some(v);
    }
    if let Some(v) = args.model_seed {
        config.model_seed = v;
    }
    if let Some(v) = args.epochs_per_stage {
        config.training.stages = CurriculumStage::default_curriculum(v);
    }
    if let Some(v) = args.stages {
        if v == 0 || v > config.training.stages.len() {
            return Err(CliError::usage(format!(
                "--stages must be in 1..={}, got {v}",
                config.training.stages.len()
            )));
        }
        config.training.stages.truncate(v);
    }
    if let Some(v) = args.steps_per_epoch {
        config.training.steps_per_epoch = Some(v);
    }
    if let Some(v) = args.batch_size {
        config.training.batch_size = v;
    }
    if let Some(v) = args.lr_max {
        config.training.lr_max = v;
    }
    if let Some(v) = args.lr_min {
        config.training.lr_min = v;
    }
    if let Some(v) = args.warmup {
        config.training.warmup_steps = v;
    }
    if let Some(v) = args.weight_decay {
        config.training.weight_decay = v;
    }
    if let Some(v) = args.clip {
        config.training.clip_max_norm = v;
    }
    if let Some(v) = args.seed {
        config.training.seed = v;
    }
    if let Some(v) = args.out {
        config.out = v;
    }

    let dataset_dir = config
        .dataset
        .clone()
        .ok_or_else(|| CliError::usage("--dataset is required (flag or config file)"))?;
    let variant = match config.variant.as_str() {
        "standard" => ModelVariant::Standard,
        "parc" => ModelVariant::Parc,
        other => {
            return Err(CliError::usage(format!(
                "unknown variant {other:?} (expected \"standard\" or \"parc\")"
            )))
        }
    };
    config.training.validate()?;

    let dataset = super::load_dataset(&dataset_dir)?;
    let scaling = compute_scaling_coefficients(&dataset)?;
    let mut model_config = match variant {
        ModelVariant::Standard => ModelConfig::standard(dataset.l),
        ModelVariant::Parc => ModelConfig::parc(dataset.l),
    };
    if let Some(h) = config.hidden {
        model_config.hidden_channels = h;
    }
    if let Some(b) = config.blocks {
        model_config.n_blocks = b;
    }
    if let Some(p) = config.dropout {
        model_config.dropout_p = p;
    }

    prepare_out_dir(&config.out, args.force)?;
    let mut model: Model<f32> = Model::new(model_config, scaling, config.model_seed)?;
    let n_params = model.params().scalar_count();
    println!(
        "training {} surrogate ({} parameters) on {} trajectories (L = {})",
        config.variant,
        n_params,
        dataset.trajectories.len(),
        dataset.l
    );

    let report = train(&mut model, &dataset, &config.training)?;

    let checkpoint_path = config.out.join("checkpoint.bin");
    let metrics_path = config.out.join("metrics.csv");
    model.save_checkpoint(&checkpoint_path)?;
    write_metrics_csv(&metrics_path, &report.metrics)?;
    let manifest_path = config.out.join("manifest.json");
    RunManifest::new("train", &config, jobs)?
        .seed(config.model_seed)
        .seed(config.training.seed)
        .input("dataset", &dataset_dir)
        .output("checkpoint", &checkpoint_path)
        .output("metrics", &metrics_path)
        .write(&manifest_path, started)?;

    let first = report.metrics.first();
    let last = report.metrics.last();
    println!(
        "  {} optimizer steps, loss {} -> {}",
        report.metrics.len(),
        first.map(|m| m.loss_total.to_string()).unwrap_or_default(),
        last.map(|m| m.loss_total.to_string()).unwrap_or_default(),
    );
    for (i, score) in report.stage_validation.iter().enumerate() {
        let marker = if i == report.best_stage { "  <- best" } else { "" };
        println!("  stage {i}: validation rollout error {score:.6}{marker}");
    }
    println!("  wrote {}", checkpoint_path.display());
    println!("  wrote {}", metrics_path.display());
    println!("  wrote {}", manifest_path.display());
    Ok(())
}
