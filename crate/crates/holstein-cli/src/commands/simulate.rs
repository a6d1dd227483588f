//! `holstein simulate`: integrate one quench trajectory exactly, write it
//! as a trajectory blob, and print conservation diagnostics.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use holstein::container::{write_trajectory_blob, TrajectoryBlob};
use holstein::datagen::{initial_state, state_to_raw, QuenchProtocol};
use holstein::dynamics::{simulate, total_energy, PhysicsParams};

use crate::manifest::{prepare_out_file, sidecar_manifest_path, RunManifest};
use crate::CliError;

#[derive(Args)]
pub struct SimulateArgs {
    /// JSON config (bare object or a manifest from an earlier run).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Lattice size (even).
    #[arg(long)]
    l: Option<usize>,
    /// Coupling before the quench (ground-state preparation).
    #[arg(long)]
    g_initial: Option<f64>,
    /// Coupling the trajectory evolves under.
    #[arg(long)]
    g_final: Option<f64>,
    /// Integration time step.
    #[arg(long)]
    dt: Option<f64>,
    /// Integration steps (0 writes the initial state only).
    #[arg(long)]
    steps: Option<usize>,
    /// Record every this-many steps.
    #[arg(long)]
    record_stride: Option<usize>,
    /// Gaussian noise on the initial displacements.
    #[arg(long)]
    q_noise_sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output trajectory blob.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing output file.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub l: usize,
    pub g_initial: f64,
    pub g_final: f64,
    pub dt: f64,
    pub steps: usize,
    pub record_stride: usize,
    pub q_noise_sigma: f64,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            l: 16,
            g_initial: 0.5,
            g_final: 0.8,
            dt: 0.01,
            steps: 76_800,
            record_stride: 64,
            q_noise_sigma: 0.0,
            seed: 42,
            out: PathBuf::from("trajectory.bin"),
        }
    }
}

pub fn run(args: SimulateArgs, jobs: usize) -> Result<(), CliError> {
    let started = Instant::now();
    let mut config: SimulateConfig =
        crate::manifest::resolve_config("simulate", args.config.as_deref())?;
    if let Some(v) = args.l {
        config.l = v;
    }
    if let Some(v) = args.g_initial {
        config.g_initial = v;
    }
    if let Some(v) = args.g_final {
        config.g_final = v;
    }
    if let Some(v) = args.dt {
        config.dt = v;
    }
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.record_stride {
        config.record_stride = v;
    }
    if let Some(v) = args.q_noise_sigma {
        config.q_noise_sigma = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.out {
        config.out = v;
    }

    // Validation: lattice parity and protocol consistency are usage errors.
    let params = PhysicsParams::new(config.l, config.g_final)?;
    if config.record_stride == 0 {
        return Err(CliError::usage("--record-stride must be at least 1"));
    }
    if config.steps % config.record_stride != 0 {
        return Err(CliError::usage(format!(
            "--steps {} is not a multiple of --record-stride {}",
            config.steps, config.record_stride
        )));
    }
    let protocol = QuenchProtocol {
        g_initial: config.g_initial,
        g_final: config.g_final,
        dt_integration: config.dt,
        prediction_stride: config.record_stride,
        n_prediction_steps: config.steps / config.record_stride,
        n_trajectories: 1,
        transient_skip: 0.0,
        q_noise_sigma: config.q_noise_sigma,
        record_midpoints: false,
        seed: config.seed,
    };
    // `--steps 0` legitimately records the initial state only; the protocol
    // validator insists on at least one step, so check a clamped copy.
    let mut check = protocol.clone();
    check.n_prediction_steps = check.n_prediction_steps.max(1);
    check.validate()?;
    prepare_out_file(&config.out, args.force)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let initial = initial_state(&params, &protocol, &mut rng)?;
    let snapshots = simulate(&initial, &params, config.dt, config.steps, config.record_stride)?;

    // Conservation diagnostics over the recorded trace.
    let n_electrons = config.l as f64 / 2.0;
    let e0 = total_energy(&snapshots[0], &params);
    let mut max_trace_drift = 0.0_f64;
    let mut max_energy_drift = 0.0_f64;
    let mut max_hermiticity = 0.0_f64;
    for state in &snapshots {
        max_trace_drift = max_trace_drift.max((state.trace() - n_electrons).abs());
        max_energy_drift =
            max_energy_drift.max(((total_energy(state, &params) - e0) / e0.abs()).abs());
        max_hermiticity = max_hermiticity.max(state.hermiticity_deviation());
    }

    let blob = TrajectoryBlob {
        l: config.l,
        snapshots: snapshots.iter().map(state_to_raw).collect(),
        midpoints: Vec::new(),
    };
    write_trajectory_blob(&config.out, &blob)?;

    let manifest_path = sidecar_manifest_path(&config.out);
    RunManifest::new("simulate", &config, jobs)?
        .seed(config.seed)
        .output("trajectory", &config.out)
        .write(&manifest_path, started)?;

    println!(
        "simulated {} steps at dt = {} (g: {} -> {}), recorded {} snapshots",
        config.steps,
        config.dt,
        config.g_initial,
        config.g_final,
        snapshots.len()
    );
    println!("  final time               {}", snapshots.last().expect("non-empty").time);
    println!("  max |trace - N|          {max_trace_drift:.3e}");
    println!("  max relative energy drift {max_energy_drift:.3e}");
    println!("  max hermiticity deviation {max_hermiticity:.3e}");
    println!("  wrote {}", config.out.display());
    println!("  wrote {}", manifest_path.display());
    Ok(())
}
