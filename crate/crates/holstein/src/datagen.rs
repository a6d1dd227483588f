//! Interaction-quench dataset generation and on-disk dataset layout.
//!
//! A dataset is a directory holding `metadata.json` plus one binary blob per
//! trajectory (see [`crate::container`]).  Two standard recipes are provided:
//!
//! * **Shallow quench** — prepare the self-consistent CDW ground state at
//!   `g_initial`, switch abruptly to `g_final`, and record snapshots every
//!   `prediction_stride` integration steps.  All trajectories sample one and
//!   the same deterministic flow, offset from each other by a single
//!   integration step, which tiles the prediction interval uniformly.
//! * **Deep quench** — start from the free Fermi sea with small Gaussian
//!   noise on the displacements (fresh per-trajectory seed), switch on the
//!   coupling, discard a transient, then record snapshots and (optionally)
//!   the mid-interval states used to supervise derivative estimates.
//!
//! Offsets cycle modulo the stride and are applied before the transient skip.

use std::path::Path;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{
    self, ContainerError, RawState, TrajectoryBlob,
};
use crate::dynamics::{
    cdw_ground_state, eval_rhs, free_fermi_ground_state, DynamicsError, LatticeState,
    PhysicsParams, Rk4, StateDerivative,
};

/// Trace tolerance applied to every state recorded or loaded.
use crate::dynamics as dyn_mod;

/// Errors from dataset generation, serialization, and scaling.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("output directory {0} is not empty (pass force to overwrite)")]
    OutputNotEmpty(std::path::PathBuf),
    #[error("metadata disagrees with blob {path}: {what}")]
    MetadataMismatch { path: std::path::PathBuf, what: String },
    #[error("metadata error in {path}: {source}")]
    Json {
        path: std::path::PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("dataset holds no trajectories")]
    EmptyDataset,
    #[error("degenerate scaling coefficient {which}: field is identically zero across the dataset")]
    DegenerateScaling { which: &'static str },
}

/// Everything that determines a quench run, minus the lattice size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuenchProtocol {
    /// Coupling used to prepare the initial state.
    pub g_initial: f64,
    /// Coupling active during the recorded evolution.
    pub g_final: f64,
    /// Integration time step `dt`.
    pub dt_integration: f64,
    /// Integration steps per stored prediction interval; the surrogate's step
    /// is `prediction_stride * dt_integration`.
    pub prediction_stride: usize,
    /// Number of prediction intervals; each trajectory stores this + 1
    /// snapshots.
    pub n_prediction_steps: usize,
    /// Number of trajectories.
    pub n_trajectories: usize,
    /// Simulation time discarded between the quench and the first snapshot.
    pub transient_skip: f64,
    /// Standard deviation of the Gaussian noise added to the initial
    /// displacements (deep quench).
    pub q_noise_sigma: f64,
    /// Record the state at the middle of every prediction interval.
    pub record_midpoints: bool,
    /// Base seed; per-trajectory seeds are derived from it.
    pub seed: u64,
}

impl QuenchProtocol {
    /// The shallow-quench recipe: `g` 0.5 -> 0.8, snapshots every 64 steps of
    /// `dt = 0.01` (prediction step 0.64), 64 single-step-offset trajectories
    /// of 1201 snapshots each — 768 time units of dynamics per trajectory.
    pub fn shallow() -> Self {
        Self {
            g_initial: 0.5,
            g_final: 0.8,
            dt_integration: 0.01,
            prediction_stride: 64,
            n_prediction_steps: 1200,
            n_trajectories: 64,
            transient_skip: 0.0,
            q_noise_sigma: 0.0,
            record_midpoints: false,
            seed: 42,
        }
    }

    /// The deep-quench recipe: `g` 0 -> 1.0 from the noisy free gas
    /// (`sigma = 1e-4`), snapshots every 256 steps of `dt = 0.01`
    /// (prediction step 2.56) after discarding 64 time units of transient,
    /// with mid-interval states recorded.  Full scale is 1228 trajectories;
    /// reduced runs override `n_trajectories`.
    pub fn deep() -> Self {
        Self {
            g_initial: 0.0,
            g_final: 1.0,
            dt_integration: 0.01,
            prediction_stride: 256,
            n_prediction_steps: 1000,
            n_trajectories: 1228,
            transient_skip: 64.0,
            q_noise_sigma: 1e-4,
            record_midpoints: true,
            seed: 42,
        }
    }

    /// Surrogate prediction step `Delta t = prediction_stride * dt`.
    pub fn dt_prediction(&self) -> f64 {
        self.prediction_stride as f64 * self.dt_integration
    }

    /// Transient skip expressed in integration steps.
    pub fn skip_steps(&self) -> usize {
        (self.transient_skip / self.dt_integration).round() as usize
    }

    /// Check internal consistency.
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |what: String| Err(DataError::InvalidProtocol(what));
        if !(self.dt_integration.is_finite() && self.dt_integration > 0.0) {
            return bad(format!("dt_integration = {}", self.dt_integration));
        }
        if !self.g_initial.is_finite() || !self.g_final.is_finite() {
            return bad("non-finite coupling".into());
        }
        if self.prediction_stride == 0 {
            return bad("prediction_stride must be at least 1".into());
        }
        if self.n_prediction_steps == 0 {
            return bad("n_prediction_steps must be at least 1".into());
        }
        if self.n_trajectories == 0 {
            return bad("n_trajectories must be at least 1".into());
        }
        if self.record_midpoints && self.prediction_stride % 2 != 0 {
            return bad(format!(
                "midpoint recording needs an even prediction_stride, got {}",
                self.prediction_stride
            ));
        }
        if !(self.q_noise_sigma.is_finite() && self.q_noise_sigma >= 0.0) {
            return bad(format!("q_noise_sigma = {}", self.q_noise_sigma));
        }
        if !(self.transient_skip.is_finite() && self.transient_skip >= 0.0) {
            return bad(format!("transient_skip = {}", self.transient_skip));
        }
        let steps = self.transient_skip / self.dt_integration;
        if (steps - steps.round()).abs() > 1e-9 {
            return bad(format!(
                "transient_skip {} is not a whole number of integration steps",
                self.transient_skip
            ));
        }
        Ok(())
    }
}

/// Train/test membership of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// SplitMix64 hash step, used wherever a deterministic index hash is needed.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic 90/10 split by trajectory index hash.
pub fn split_of_index(index: usize) -> Split {
    if splitmix64(index as u64) % 10 == 0 {
        Split::Test
    } else {
        Split::Train
    }
}

/// Per-trajectory RNG seed derived from the protocol seed.
pub fn trajectory_seed(protocol_seed: u64, index: usize) -> u64 {
    splitmix64(protocol_seed ^ splitmix64(index as u64))
}

/// One recorded trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Position in the dataset; drives the offset, the seed, and the split.
    pub index: usize,
    /// RNG seed used for this trajectory's initial noise.
    pub seed: u64,
    /// Integration-step offset applied before the transient skip.
    pub offset: usize,
    /// States every `prediction_stride` steps; `n_prediction_steps + 1` of
    /// them.
    pub snapshots: Vec<LatticeState>,
    /// Mid-interval states (`n_prediction_steps` of them) when recorded,
    /// otherwise empty.
    pub midpoints: Vec<LatticeState>,
}

impl Trajectory {
    /// Split membership of this trajectory.
    pub fn split(&self) -> Split {
        split_of_index(self.index)
    }
}

/// An in-memory dataset: the protocol, the lattice size, and the recorded
/// trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Lattice size.
    pub l: usize,
    /// Human-readable generator label (`"shallow-quench"`, `"deep-quench"`).
    pub generator: String,
    /// Protocol that produced (or would reproduce) the data.
    pub protocol: QuenchProtocol,
    /// The trajectories, in index order.
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    /// Physics parameters of the recorded evolution (`g = g_final`).
    pub fn physics_params(&self) -> Result<PhysicsParams, DynamicsError> {
        Ok(PhysicsParams::new(self.l, self.protocol.g_final)?)
    }

    /// Indices of train and test trajectories under the deterministic split.
    pub fn split_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for t in &self.trajectories {
            match t.split() {
                Split::Train => train.push(t.index),
                Split::Test => test.push(t.index),
            }
        }
        (train, test)
    }

    /// Trajectories in the training split.
    pub fn train_trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().filter(|t| t.split() == Split::Train)
    }

    /// Trajectories in the held-out split.
    pub fn test_trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().filter(|t| t.split() == Split::Test)
    }
}

/// Pre-quench initial state: the self-consistent CDW ground state at
/// `g_initial` (or the free-electron gas when `g_initial = 0`), with
/// optional Gaussian displacement noise drawn from `rng`.
pub fn initial_state(
    params_final: &PhysicsParams,
    protocol: &QuenchProtocol,
    rng: &mut ChaCha8Rng,
) -> Result<LatticeState, DataError> {
    let mut state = if protocol.g_initial == 0.0 {
        free_fermi_ground_state(&params_final.with_g(0.0))
    } else {
        cdw_ground_state(&params_final.with_g(protocol.g_initial))?
    };
    if protocol.q_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, protocol.q_noise_sigma)
            .map_err(|e| DataError::InvalidProtocol(format!("noise: {e}")))?;
        for i in 0..state.q.len() {
            state.q[i] += normal.sample(rng);
        }
    }
    Ok(state)
}

/// Record plan for one trajectory driven step by step.
struct Recorder<'a> {
    protocol: &'a QuenchProtocol,
    offset: usize,
    expected_trace: f64,
    snapshots: Vec<LatticeState>,
    midpoints: Vec<LatticeState>,
}

impl<'a> Recorder<'a> {
    fn new(protocol: &'a QuenchProtocol, offset: usize, expected_trace: f64) -> Self {
        Self {
            protocol,
            offset,
            expected_trace,
            snapshots: Vec::with_capacity(protocol.n_prediction_steps + 1),
            midpoints: Vec::with_capacity(if protocol.record_midpoints {
                protocol.n_prediction_steps
            } else {
                0
            }),
        }
    }

    /// Total integration steps this trajectory needs.
    fn final_step(&self) -> usize {
        self.offset
            + self.protocol.skip_steps()
            + self.protocol.prediction_stride * self.protocol.n_prediction_steps
    }

    /// Offer the state after `global_step` integration steps; records it if
    /// the plan wants it.  Snapshot times are derived from the integer step
    /// index so they are exactly reproducible.
    fn offer(&mut self, global_step: usize, state: &LatticeState) -> Result<(), DataError> {
        let start = self.offset + self.protocol.skip_steps();
        if global_step < start {
            return Ok(());
        }
        let stride = self.protocol.prediction_stride;
        let rel = global_step - start;
        let is_snapshot = rel % stride == 0 && rel / stride <= self.protocol.n_prediction_steps;
        let is_midpoint = self.protocol.record_midpoints
            && rel % stride == stride / 2
            && rel / stride < self.protocol.n_prediction_steps;
        if !(is_snapshot || is_midpoint) {
            return Ok(());
        }
        dyn_mod::check_integrity(state, self.expected_trace, global_step)?;
        state.validate_structure(self.expected_trace.round() as usize)?;
        let mut snap = state.clone();
        snap.time = global_step as f64 * self.protocol.dt_integration;
        if is_snapshot {
            self.snapshots.push(snap);
        } else {
            self.midpoints.push(snap);
        }
        Ok(())
    }
}

/// Generate the shallow-quench dataset.
///
/// All trajectories follow the single deterministic flow started from the
/// CDW ground state at `g_initial`, so the whole family is produced by one
/// master integration recorded at every step and routed to the trajectory
/// whose offset matches; trajectory `k` (offset `k mod stride`) is bitwise
/// identical to integrating it on its own.
pub fn generate_shallow_dataset(l: usize, protocol: &QuenchProtocol) -> Result<Dataset, DataError> {
    protocol.validate()?;
    let params = PhysicsParams::new(l, protocol.g_final)?;
    let mut seed_rng = ChaCha8Rng::seed_from_u64(trajectory_seed(protocol.seed, 0));
    let initial = initial_state(&params, protocol, &mut seed_rng)?;
    initial.validate(params.n_electrons)?;

    let stride = protocol.prediction_stride;
    let mut recorders: Vec<Recorder> = (0..protocol.n_trajectories)
        .map(|k| Recorder::new(protocol, k % stride, params.n_electrons as f64))
        .collect();
    let last_step = recorders.iter().map(Recorder::final_step).max().unwrap();

    let mut state = initial;
    let mut stepper = Rk4::new(params, protocol.dt_integration);
    for step in 0..=last_step {
        if step > 0 {
            stepper.step(&mut state);
        }
        for rec in &mut recorders {
            rec.offer(step, &state)?;
        }
    }

    let trajectories = recorders
        .into_iter()
        .enumerate()
        .map(|(k, rec)| Trajectory {
            index: k,
            seed: trajectory_seed(protocol.seed, 0),
            offset: k % stride,
            snapshots: rec.snapshots,
            midpoints: rec.midpoints,
        })
        .collect();
    Ok(Dataset {
        l,
        generator: "shallow-quench".into(),
        protocol: protocol.clone(),
        trajectories,
    })
}

/// Generate the deep-quench dataset.
///
/// Each trajectory starts from the free-gas (or CDW, if `g_initial > 0`)
/// state perturbed with its own seeded Gaussian displacement noise and is
/// integrated independently: offset steps, then the transient skip, then the
/// recorded window.
pub fn generate_deep_dataset(l: usize, protocol: &QuenchProtocol) -> Result<Dataset, DataError> {
    protocol.validate()?;
    let params = PhysicsParams::new(l, protocol.g_final)?;
    let stride = protocol.prediction_stride;

    use rayon::prelude::*;
    let trajectories: Result<Vec<Trajectory>, DataError> = (0..protocol.n_trajectories)
        .into_par_iter()
        .map(|k| {
            let seed = trajectory_seed(protocol.seed, k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let initial = initial_state(&params, protocol, &mut rng)?;
            initial.validate(params.n_electrons)?;

            let mut rec = Recorder::new(protocol, k % stride, params.n_electrons as f64);
            let last_step = rec.final_step();
            let mut state = initial;
            let mut stepper = Rk4::new(params, protocol.dt_integration);
            for step in 0..=last_step {
                if step > 0 {
                    stepper.step(&mut state);
                }
                rec.offer(step, &state)?;
            }
            Ok(Trajectory {
                index: k,
                seed,
                offset: k % stride,
                snapshots: rec.snapshots,
                midpoints: rec.midpoints,
            })
        })
        .collect();

    Ok(Dataset {
        l,
        generator: "deep-quench".into(),
        protocol: protocol.clone(),
        trajectories: trajectories?,
    })
}

/// The nine normalization constants of the surrogate models: max-abs state
/// components (`r`, `q`, `p`), max-abs time derivatives (`r_d`, `q_d`,
/// `p_d`), and max-abs stepwise updates (`r_delta`, `q_delta`, `p_delta`),
/// each over the whole dataset.  `r`-family values cover the real and
/// imaginary parts of `rho` jointly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingCoefficients {
    pub r: f64,
    pub q: f64,
    pub p: f64,
    pub r_d: f64,
    pub q_d: f64,
    pub p_d: f64,
    pub r_delta: f64,
    pub q_delta: f64,
    pub p_delta: f64,
}

impl ScalingCoefficients {
    /// All-ones coefficients (identity scaling).
    pub fn ones() -> Self {
        Self {
            r: 1.0,
            q: 1.0,
            p: 1.0,
            r_d: 1.0,
            q_d: 1.0,
            p_d: 1.0,
            r_delta: 1.0,
            q_delta: 1.0,
            p_delta: 1.0,
        }
    }

    /// The nine values in declaration order, with their names.
    pub fn named(&self) -> [(&'static str, f64); 9] {
        [
            ("r", self.r),
            ("q", self.q),
            ("p", self.p),
            ("r_d", self.r_d),
            ("q_d", self.q_d),
            ("p_d", self.p_d),
            ("r_delta", self.r_delta),
            ("q_delta", self.q_delta),
            ("p_delta", self.p_delta),
        ]
    }
}

fn max_abs_rho(rho: &Array2<Complex64>) -> f64 {
    rho.iter()
        .map(|z| z.re.abs().max(z.im.abs()))
        .fold(0.0, f64::max)
}

fn max_abs(v: &Array1<f64>) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Supervision target for the PARC differentiator: the exact equations of
/// motion evaluated at a stored mid-interval state.  This is the same
/// right-hand side the integrator uses for its stage derivatives, so the
/// target is consistent with the dynamics to machine precision.
pub fn midpoint_derivative(state: &LatticeState, params: &PhysicsParams) -> StateDerivative {
    eval_rhs(state, params)
}

/// Compute the nine scaling coefficients of a dataset.
///
/// State and derivative maxima run over all stored states (snapshots and
/// midpoints); derivatives are evaluated with the exact right-hand side at
/// the dataset's `g_final`.  Update maxima run over consecutive snapshot
/// pairs.  Any identically-zero field is reported as a degenerate
/// coefficient.
pub fn compute_scaling_coefficients(dataset: &Dataset) -> Result<ScalingCoefficients, DataError> {
    if dataset.trajectories.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let params = dataset.physics_params()?;
    let mut c = ScalingCoefficients {
        r: 0.0,
        q: 0.0,
        p: 0.0,
        r_d: 0.0,
        q_d: 0.0,
        p_d: 0.0,
        r_delta: 0.0,
        q_delta: 0.0,
        p_delta: 0.0,
    };
    for traj in &dataset.trajectories {
        for state in traj.snapshots.iter().chain(&traj.midpoints) {
            c.r = c.r.max(max_abs_rho(&state.rho));
            c.q = c.q.max(max_abs(&state.q));
            c.p = c.p.max(max_abs(&state.p));
            let d = eval_rhs(state, &params);
            c.r_d = c.r_d.max(max_abs_rho(&d.drho));
            c.q_d = c.q_d.max(max_abs(&d.dq));
            c.p_d = c.p_d.max(max_abs(&d.dp));
        }
        for pair in traj.snapshots.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let dr = b
                .rho
                .iter()
                .zip(a.rho.iter())
                .map(|(x, y)| {
                    let d = x - y;
                    d.re.abs().max(d.im.abs())
                })
                .fold(0.0, f64::max);
            c.r_delta = c.r_delta.max(dr);
            for i in 0..dataset.l {
                c.q_delta = c.q_delta.max((b.q[i] - a.q[i]).abs());
                c.p_delta = c.p_delta.max((b.p[i] - a.p[i]).abs());
            }
        }
    }
    for (name, value) in c.named() {
        if value == 0.0 {
            return Err(DataError::DegenerateScaling { which: name });
        }
    }
    Ok(c)
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryMeta {
    index: usize,
    file: String,
    seed: u64,
    offset: usize,
    split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    schema_version: u32,
    generator: String,
    l: usize,
    protocol: QuenchProtocol,
    dt_prediction: f64,
    snapshots_per_trajectory: usize,
    midpoints_per_trajectory: usize,
    trajectories: Vec<TrajectoryMeta>,
}

/// Flatten a state into the container's raw column layout.
pub fn state_to_raw(state: &LatticeState) -> RawState {
    RawState {
        q: state.q.to_vec(),
        p: state.p.to_vec(),
        re_rho: state.rho.iter().map(|z| z.re).collect(),
        im_rho: state.rho.iter().map(|z| z.im).collect(),
    }
}

/// Rebuild a state from raw container columns; `time` is supplied by the
/// caller because blobs do not store timestamps.
pub fn raw_to_state(raw: &RawState, l: usize, time: f64) -> LatticeState {
    let mut rho = Array2::<Complex64>::zeros((l, l));
    for i in 0..l {
        for j in 0..l {
            rho[[i, j]] = Complex64::new(raw.re_rho[i * l + j], raw.im_rho[i * l + j]);
        }
    }
    LatticeState::from_parts_unchecked(
        Array1::from_vec(raw.q.clone()),
        Array1::from_vec(raw.p.clone()),
        rho,
        time,
    )
}

fn blob_name(index: usize) -> String {
    format!("traj_{index:04}.bin")
}

/// Write a dataset directory: `metadata.json` plus one verified binary blob
/// per trajectory.  An existing non-empty directory is refused unless
/// `force` is set.
pub fn write_dataset(dataset: &Dataset, dir: &Path, force: bool) -> Result<(), DataError> {
    if dir.exists() {
        let non_empty = dir
            .read_dir()
            .map_err(|e| DataError::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(DataError::OutputNotEmpty(dir.to_path_buf()));
        }
    } else {
        std::fs::create_dir_all(dir).map_err(|e| DataError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }

    let first = dataset.trajectories.first().ok_or(DataError::EmptyDataset)?;
    let meta = DatasetMeta {
        schema_version: 1,
        generator: dataset.generator.clone(),
        l: dataset.l,
        protocol: dataset.protocol.clone(),
        dt_prediction: dataset.protocol.dt_prediction(),
        snapshots_per_trajectory: first.snapshots.len(),
        midpoints_per_trajectory: first.midpoints.len(),
        trajectories: dataset
            .trajectories
            .iter()
            .map(|t| TrajectoryMeta {
                index: t.index,
                file: blob_name(t.index),
                seed: t.seed,
                offset: t.offset,
                split: t.split(),
            })
            .collect(),
    };
    let meta_path = dir.join("metadata.json");
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| DataError::Json {
        path: meta_path.clone(),
        source: e,
    })?;
    std::fs::write(&meta_path, json).map_err(|e| DataError::Io {
        path: meta_path,
        source: e,
    })?;

    for traj in &dataset.trajectories {
        let blob = TrajectoryBlob {
            l: dataset.l,
            snapshots: traj.snapshots.iter().map(state_to_raw).collect(),
            midpoints: traj.midpoints.iter().map(state_to_raw).collect(),
        };
        container::write_trajectory_blob(&dir.join(blob_name(traj.index)), &blob)?;
    }
    Ok(())
}

/// Read a dataset directory back, verifying every blob (magic, version,
/// length, CRC), its consistency with the metadata, and the structural state
/// invariants.  Snapshot times are reconstructed from the integer step
/// indices, bit-for-bit equal to what generation produced.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let meta_path = dir.join("metadata.json");
    let meta_bytes = std::fs::read(&meta_path).map_err(|e| DataError::Io {
        path: meta_path.clone(),
        source: e,
    })?;
    let meta: DatasetMeta = serde_json::from_slice(&meta_bytes).map_err(|e| DataError::Json {
        path: meta_path.clone(),
        source: e,
    })?;
    meta.protocol.validate()?;
    let params = PhysicsParams::new(meta.l, meta.protocol.g_final)?;

    let dt = meta.protocol.dt_integration;
    let stride = meta.protocol.prediction_stride;
    let skip = meta.protocol.skip_steps();

    let mut trajectories = Vec::with_capacity(meta.trajectories.len());
    for tm in &meta.trajectories {
        let path = dir.join(&tm.file);
        let blob = container::read_trajectory_blob(&path)?;
        if blob.l != meta.l {
            return Err(DataError::MetadataMismatch {
                path,
                what: format!("blob L = {}, metadata L = {}", blob.l, meta.l),
            });
        }
        if blob.snapshots.len() != meta.snapshots_per_trajectory
            || blob.midpoints.len() != meta.midpoints_per_trajectory
        {
            return Err(DataError::MetadataMismatch {
                path,
                what: format!(
                    "blob holds {} snapshots / {} midpoints, metadata says {} / {}",
                    blob.snapshots.len(),
                    blob.midpoints.len(),
                    meta.snapshots_per_trajectory,
                    meta.midpoints_per_trajectory
                ),
            });
        }
        let snapshots: Vec<LatticeState> = blob
            .snapshots
            .iter()
            .enumerate()
            .map(|(j, raw)| {
                let step = tm.offset + skip + stride * j;
                raw_to_state(raw, meta.l, step as f64 * dt)
            })
            .collect();
        let midpoints: Vec<LatticeState> = blob
            .midpoints
            .iter()
            .enumerate()
            .map(|(j, raw)| {
                let step = tm.offset + skip + stride * j + stride / 2;
                raw_to_state(raw, meta.l, step as f64 * dt)
            })
            .collect();
        for state in snapshots.iter().chain(&midpoints) {
            state.validate_structure(params.n_electrons)?;
        }
        trajectories.push(Trajectory {
            index: tm.index,
            seed: tm.seed,
            offset: tm.offset,
            snapshots,
            midpoints,
        });
    }
    Ok(Dataset {
        l: meta.l,
        generator: meta.generator,
        protocol: meta.protocol,
        trajectories,
    })
}
