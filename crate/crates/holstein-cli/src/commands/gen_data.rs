//! `holstein gen-data`: generate a quench dataset directory.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use serde::{Deserialize, Serialize};

use holstein::datagen::{
    generate_deep_dataset, generate_shallow_dataset, write_dataset, QuenchProtocol,
};
use holstein::dynamics::PhysicsParams;

use crate::manifest::RunManifest;
use crate::CliError;

#[derive(Args)]
pub struct GenDataArgs {
    /// JSON config (bare object or a manifest from an earlier run).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base protocol: the shallow (0.5 -> 0.8) or deep (0 -> 1.0) quench.
    #[arg(long, value_parser = ["shallow", "deep"])]
    protocol: Option<String>,
    /// Lattice size (even).
    #[arg(long)]
    l: Option<usize>,
    /// Number of trajectories.
    #[arg(long)]
    trajectories: Option<usize>,
    /// Snapshots per trajectory, minus the initial one.
    #[arg(long)]
    prediction_steps: Option<usize>,
    /// Integration steps per prediction step.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub l: usize,
    /// "shallow" or "deep": selects the generator (master-run slicing vs
    /// independent seeded runs).
    pub kind: String,
    pub protocol: QuenchProtocol,
    pub out: PathBuf,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            l: 16,
            kind: "shallow".to_string(),
            protocol: QuenchProtocol::shallow(),
            out: PathBuf::from("dataset"),
        }
    }
}

pub fn run(args: GenDataArgs, jobs: usize) -> Result<(), CliError> {
    let started = Instant::now();
    let mut config: GenDataConfig =
        crate::manifest::resolve_config("gen-data", args.config.as_deref())?;
    // A --protocol flag resets the whole protocol to its named baseline
    // before field-level overrides apply.
    if let Some(kind) = &args.protocol {
        config.kind = kind.clone();
        config.protocol = match kind.as_str() {
            "deep" => QuenchProtocol::deep(),
            _ => QuenchProtocol::shallow(),
        };
    }
    match config.kind.as_str() {
        "shallow" | "deep" => {}
        other => {
            return Err(CliError::usage(format!(
                "unknown protocol kind {other:?} (expected \"shallow\" or \"deep\")"
            )))
        }
    }
    if let Some(v) = args.l {
        config.l = v;
    }
    if let Some(v) = args.trajectories {
        config.protocol.n_trajectories = v;
    }
    if let Some(v) = args.prediction_steps {
        config.protocol.n_prediction_steps = v;
    }
    if let Some(v) = args.stride {
        config.protocol.prediction_stride = v;
    }
    if let Some(v) = args.seed {
        config.protocol.seed = v;
    }
    if let Some(v) = args.out {
        config.out = v;
    }

    PhysicsParams::new(config.l, config.protocol.g_final)?;
    config.protocol.validate()?;

    let dataset = match config.kind.as_str() {
        "deep" => generate_deep_dataset(config.l, &config.protocol)?,
        _ => generate_shallow_dataset(config.l, &config.protocol)?,
    };
    write_dataset(&dataset, &config.out, args.force)?;

    let (train_idx, test_idx) = dataset.split_indices();
    let manifest_path = config.out.join("manifest.json");
    RunManifest::new("gen-data", &config, jobs)?
        .seed(config.protocol.seed)
        .output("dataset", &config.out)
        .write(&manifest_path, started)?;

    let per_traj = dataset.trajectories.first().map(|t| t.snapshots.len()).unwrap_or(0);
    println!(
        "generated {} {} trajectories on L = {} ({} snapshots each, {} train / {} test)",
        dataset.trajectories.len(),
        config.kind,
        config.l,
        per_traj,
        train_idx.len(),
        test_idx.len(),
    );
    println!("  wrote {}", config.out.display());
    println!("  wrote {}", manifest_path.display());
    Ok(())
}
