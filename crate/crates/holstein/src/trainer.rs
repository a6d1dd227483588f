//! Multi-step rollout training: losses, batching, input-noise
//! regularization, the curriculum schedule, and the optimization loop.
//!
//! The training loss follows the component decomposition of the state: at
//! every rollout step the predicted update (and, for PARC, the predicted
//! mid-interval derivative) is compared to ground truth separately on four
//! components — diagonal of `rho`, off-diagonal of `rho`, `Q`, and `P` —
//! with an unsquared L2 norm per component per timestep, all in normalized
//! units.  Batches average segment losses.  The curriculum raises the
//! rollout depth `N` and the input-noise amplitude stage by stage, with the
//! learning-rate schedule warm-restarting at each stage boundary.

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{DataError, Dataset, ScalingCoefficients};
use crate::dynamics::{DynamicsError, LatticeState, PhysicsParams};
use crate::model::{embed_state, Model, ModelError, ModelVariant, StepNodes, STATE_CHANNELS};
use crate::tensor::{
    adamw_step, clip_gradients, AdamWConfig, LrSchedule, Mode, NodeId, OptimizerState, Scalar,
    Tape, Tensor, TensorError,
};

/// Errors from loss evaluation and training.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("dataset has no training trajectories")]
    EmptyTrainSplit,
    #[error("segment holds {have} snapshots, rollout depth {n} needs {need}")]
    SegmentTooShort { n: usize, need: usize, have: usize },
    #[error("parc loss needs {need} midpoint states, segment carries {have}")]
    MissingMidpoints { need: usize, have: usize },
    #[error("training diverged (non-finite loss) at stage {stage}, optimizer step {step}")]
    Diverged { stage: usize, step: usize },
}

/// One curriculum stage: rollout depth, input-noise level, and duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStage {
    /// Rollout depth `N`: the loss covers `N` self-fed predictions.
    pub rollout_steps: usize,
    /// Gaussian input-noise standard deviation, in normalized units.
    pub noise_sigma: f64,
    /// Epochs of the training split at this stage.
    pub n_epochs: usize,
}

impl CurriculumStage {
    /// The default curriculum: `N = 1, 2, 4, 8` with noise
    /// `0, 2e-3, 5e-3, 1e-2`, equal epoch budgets.
    pub fn default_curriculum(epochs_per_stage: usize) -> Vec<Self> {
        [(1, 0.0), (2, 2e-3), (4, 5e-3), (8, 1e-2)]
            .into_iter()
            .map(|(rollout_steps, noise_sigma)| Self {
                rollout_steps,
                noise_sigma,
                n_epochs: epochs_per_stage,
            })
            .collect()
    }
}

/// Everything the training loop needs besides model and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub stages: Vec<CurriculumStage>,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_max_norm: f64,
    pub seed: u64,
    /// Optional cap on optimizer steps per epoch (desk-scale budgets).
    pub steps_per_epoch: Option<usize>,
    /// Trajectories scored during per-stage validation.
    pub validation_trajectories: usize,
    /// Rollout length of the per-stage validation score.  Checkpoint
    /// selection optimizes this horizon: keep it short for one-step
    /// accuracy, lengthen it when the model is meant to hold long
    /// free-running rollouts.
    #[serde(default = "default_validation_horizon")]
    pub validation_horizon: usize,
}

fn default_validation_horizon() -> usize {
    10
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            stages: CurriculumStage::default_curriculum(2),
            batch_size: 16,
            lr_max: 1e-3,
            lr_min: 1e-5,
            warmup_steps: 200,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_max_norm: 1.0,
            seed: 42,
            steps_per_epoch: None,
            validation_trajectories: 4,
            validation_horizon: default_validation_horizon(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: String| Err(TrainError::InvalidConfig(what));
        if self.stages.is_empty() {
            return bad("at least one curriculum stage is required".into());
        }
        for pair in self.stages.windows(2) {
            if pair[1].rollout_steps < pair[0].rollout_steps
                || pair[1].noise_sigma < pair[0].noise_sigma
            {
                return bad(format!(
                    "stages must be non-decreasing in rollout depth and noise: \
                     ({}, {}) follows ({}, {})",
                    pair[1].rollout_steps,
                    pair[1].noise_sigma,
                    pair[0].rollout_steps,
                    pair[0].noise_sigma
                ));
            }
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.rollout_steps == 0 || stage.n_epochs == 0 {
                return bad(format!("stage {i}: rollout_steps and n_epochs must be positive"));
            }
            if !(stage.noise_sigma.is_finite() && stage.noise_sigma >= 0.0) {
                return bad(format!("stage {i}: noise_sigma = {}", stage.noise_sigma));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_max.is_finite() && self.lr_min.is_finite())
            || self.lr_max <= 0.0
            || self.lr_min < 0.0
            || self.lr_max < self.lr_min
        {
            return bad(format!("lr_max = {}, lr_min = {}", self.lr_max, self.lr_min));
        }
        if !(self.clip_max_norm.is_finite() && self.clip_max_norm > 0.0) {
            return bad(format!("clip_max_norm = {}", self.clip_max_norm));
        }
        if self.steps_per_epoch == Some(0)
            || self.validation_trajectories == 0
            || self.validation_horizon == 0
        {
            return bad(
                "steps_per_epoch, validation_trajectories, and validation_horizon \
                 must be positive"
                    .into(),
            );
        }
        Ok(())
    }
}

/// One metrics-log row, written per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_diff_term: f64,
    pub loss_int_term: f64,
    pub grad_norm: f64,
}

/// Training outcome: per-step metrics and per-stage validation scores.  The
/// trained model is updated in place and holds the best-validated weights.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<MetricsRow>,
    /// Mean `validation_horizon`-step rollout error after each stage.
    pub stage_validation: Vec<f64>,
    /// Stage whose weights the model ends up with.
    pub best_stage: usize,
}

/// Write the metrics log as CSV (`step,stage,lr,loss_total,loss_diff_term,
/// loss_int_term,grad_norm`).  `f64` values print in shortest-round-trip
/// form, so parsing the file back recovers them exactly.
pub fn write_metrics_csv(path: &std::path::Path, rows: &[MetricsRow]) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "step,stage,lr,loss_total,loss_diff_term,loss_int_term,grad_norm"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.stage, r.lr, r.loss_total, r.loss_diff_term, r.loss_int_term, r.grad_norm
        )?;
    }
    out.flush()
}

/// The four loss components: diagonal of `rho`, off-diagonal of `rho`, `Q`,
/// and `P`, as masks over the `[4, L, L]` state tensor.  Complex entries
/// contribute through their real and imaginary channels.
fn component_masks<S: Scalar>(l: usize) -> [Tensor<S>; 4] {
    let ll = l * l;
    let mut rho_diag = vec![S::zero(); STATE_CHANNELS * ll];
    let mut rho_off = vec![S::zero(); STATE_CHANNELS * ll];
    let mut q = vec![S::zero(); STATE_CHANNELS * ll];
    let mut p = vec![S::zero(); STATE_CHANNELS * ll];
    for i in 0..l {
        for j in 0..l {
            let idx = i * l + j;
            if i == j {
                rho_diag[idx] = S::one();
                rho_diag[ll + idx] = S::one();
            } else {
                rho_off[idx] = S::one();
                rho_off[ll + idx] = S::one();
            }
        }
        q[2 * ll + i * l + i] = S::one();
        p[3 * ll + i * l + i] = S::one();
    }
    let shape = [STATE_CHANNELS, l, l];
    [
        Tensor::from_vec(&shape, rho_diag).expect("static shape"),
        Tensor::from_vec(&shape, rho_off).expect("static shape"),
        Tensor::from_vec(&shape, q).expect("static shape"),
        Tensor::from_vec(&shape, p).expect("static shape"),
    ]
}

/// Add Gaussian noise to an embedded physical-units state tensor on its
/// structural support.  `sigma` is expressed in normalized units; since the
/// network divides channel `c` by its state coefficient, a normalized-space
/// perturbation of `sigma` equals a physical-space perturbation of
/// `sigma * coeff_c` — which is what this applies, leaving the
/// structurally-zero off-diagonals of the `Q`/`P` channels untouched.
pub fn add_input_noise<S: Scalar>(
    tensor: &mut Tensor<S>,
    sigma: f64,
    scaling: &ScalingCoefficients,
    rng: &mut ChaCha8Rng,
) -> Result<(), TrainError> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(TrainError::InvalidConfig(format!("noise sigma = {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let shape = tensor.shape().to_vec();
    if shape.len() != 3 || shape[0] != STATE_CHANNELS || shape[1] != shape[2] {
        return Err(TrainError::Tensor(TensorError::ShapeMismatch {
            op: "add_input_noise",
            detail: format!("{shape:?}"),
        }));
    }
    let l = shape[1];
    let ll = l * l;
    let normal = Normal::new(0.0, sigma).expect("checked sigma");
    let coeffs = [scaling.r, scaling.r, scaling.q, scaling.p];
    let data = tensor.data_mut();
    for (c, &coeff) in coeffs.iter().enumerate() {
        if c < 2 {
            for idx in 0..ll {
                let d = normal.sample(rng) * coeff;
                data[c * ll + idx] = data[c * ll + idx] + S::from_f64(d);
            }
        } else {
            for i in 0..l {
                let d = normal.sample(rng) * coeff;
                let idx = c * ll + i * l + i;
                data[idx] = data[idx] + S::from_f64(d);
            }
        }
    }
    Ok(())
}

/// A training window: `N + 1` consecutive snapshots and, for PARC, the `N`
/// mid-interval states between them.
#[derive(Debug, Clone, Copy)]
pub struct Segment<'a> {
    pub snapshots: &'a [LatticeState],
    pub midpoints: &'a [LatticeState],
}

/// Index of one sampled window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowIndex {
    pub trajectory: usize,
    pub start: usize,
}

/// Sample one epoch of windows with replacement: every batch holds
/// `batch_size` windows drawn uniformly over all valid `(trajectory, start)`
/// pairs, and the epoch holds `ceil(total_windows / batch_size)` batches
/// (optionally capped), so each window is covered once in expectation.
pub fn make_batches(
    trajectory_lengths: &[(usize, usize)],
    n: usize,
    batch_size: usize,
    cap: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<WindowIndex>>, TrainError> {
    if batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
    }
    let mut cumulative = Vec::with_capacity(trajectory_lengths.len());
    let mut total = 0usize;
    for &(index, len) in trajectory_lengths {
        if len < n + 1 {
            return Err(TrainError::SegmentTooShort {
                n,
                need: n + 1,
                have: len,
            });
        }
        total += len - n;
        cumulative.push((index, total));
    }
    if total == 0 {
        return Err(TrainError::EmptyTrainSplit);
    }
    let mut n_batches = total.div_ceil(batch_size);
    if let Some(c) = cap {
        n_batches = n_batches.min(c);
    }
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let g = rng.gen_range(0..total);
            let pos = cumulative.partition_point(|&(_, c)| c <= g);
            let (index, upper) = cumulative[pos];
            let len = trajectory_lengths[pos].1;
            let start = g - (upper - (len - n));
            batch.push(WindowIndex {
                trajectory: index,
                start,
            });
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Nodes of one recorded segment loss.
struct SegmentLoss {
    diff_terms: Vec<NodeId>,
    int_terms: Vec<NodeId>,
}

/// Context shared by every segment of a training run.
struct LossContext<S: Scalar> {
    masks: [Tensor<S>; 4],
    params_physics: PhysicsParams,
    update_normalizers: [f64; 4],
    derivative_normalizers: [f64; 4],
}

impl<S: Scalar> LossContext<S> {
    fn new(model: &Model<S>, params_physics: PhysicsParams) -> Self {
        let s = model.scaling();
        Self {
            masks: component_masks(model.config().l),
            params_physics,
            update_normalizers: [
                1.0 / s.r_delta,
                1.0 / s.r_delta,
                1.0 / s.q_delta,
                1.0 / s.p_delta,
            ],
            derivative_normalizers: [1.0 / s.r_d, 1.0 / s.r_d, 1.0 / s.q_d, 1.0 / s.p_d],
        }
    }

    /// Normalized ground-truth update tensor between consecutive snapshots.
    fn target_update(&self, a: &LatticeState, b: &LatticeState) -> Result<Tensor<S>, TrainError> {
        let l = a.l();
        let mut drho = Array2::<Complex64>::zeros((l, l));
        for i in 0..l {
            for j in 0..l {
                drho[[i, j]] = b.rho[[i, j]] - a.rho[[i, j]];
            }
        }
        let dq = &b.q - &a.q;
        let dp = &b.p - &a.p;
        let mut tensor = embed_state::<S>(&drho, &dq, &dp)?;
        scale_channels(&mut tensor, &self.update_normalizers);
        Ok(tensor)
    }

    /// Normalized mid-interval derivative target.
    fn target_derivative(&self, mid: &LatticeState) -> Result<Tensor<S>, TrainError> {
        let d = crate::datagen::midpoint_derivative(mid, &self.params_physics);
        let mut tensor = embed_state::<S>(&d.drho, &d.dq, &d.dp)?;
        scale_channels(&mut tensor, &self.derivative_normalizers);
        Ok(tensor)
    }
}

fn scale_channels<S: Scalar>(tensor: &mut Tensor<S>, factors: &[f64; 4]) {
    let per_channel = tensor.len() / STATE_CHANNELS;
    let data = tensor.data_mut();
    for (c, &f) in factors.iter().enumerate() {
        let fs = S::from_f64(f);
        for x in &mut data[c * per_channel..(c + 1) * per_channel] {
            *x = *x * fs;
        }
    }
}

/// Record the loss of one segment: roll the model `N` steps from
/// `segment.snapshots[0]` and accumulate the four component norms of the
/// update error (and, for PARC, of the derivative error) at every step.
fn record_segment_loss<S: Scalar>(
    model: &Model<S>,
    tape: &mut Tape<S>,
    ctx: &LossContext<S>,
    segment: Segment<'_>,
    n: usize,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SegmentLoss, TrainError> {
    if segment.snapshots.len() < n + 1 {
        return Err(TrainError::SegmentTooShort {
            n,
            need: n + 1,
            have: segment.snapshots.len(),
        });
    }
    let parc = model.config().variant == ModelVariant::Parc;
    if parc && segment.midpoints.len() < n {
        return Err(TrainError::MissingMidpoints {
            need: n,
            have: segment.midpoints.len(),
        });
    }

    let first = &segment.snapshots[0];
    let mut input_tensor = embed_state::<S>(&first.rho, &first.q, &first.p)?;
    // Noise regularizes the first rollout input only; later inputs are the
    // model's own outputs.
    add_input_noise(&mut input_tensor, noise_sigma, model.scaling(), rng)?;
    let mut state = tape.constant(input_tensor)?;

    let mut loss = SegmentLoss {
        diff_terms: Vec::new(),
        int_terms: Vec::new(),
    };
    for t in 0..n {
        let nodes: StepNodes = model.step_on_tape(tape, state, rng)?;
        let target = tape.constant(ctx.target_update(&segment.snapshots[t], &segment.snapshots[t + 1])?)?;
        let err = tape.sub(nodes.update_normalized, target)?;
        for mask in &ctx.masks {
            let masked = tape.mul_mask(err, mask)?;
            let sq = tape.square(masked)?;
            let total = tape.sum(sq)?;
            loss.int_terms.push(tape.sqrt(total)?);
        }
        if parc {
            let d_pred = nodes.derivative_normalized.expect("parc step");
            let d_target = tape.constant(ctx.target_derivative(&segment.midpoints[t])?)?;
            let err = tape.sub(d_pred, d_target)?;
            for mask in &ctx.masks {
                let masked = tape.mul_mask(err, mask)?;
                let sq = tape.square(masked)?;
                let total = tape.sum(sq)?;
                loss.diff_terms.push(tape.sqrt(total)?);
            }
        }
        state = nodes.next_state;
    }
    Ok(loss)
}

fn sum_nodes<S: Scalar>(tape: &mut Tape<S>, nodes: &[NodeId]) -> Result<Option<NodeId>, TensorError> {
    let mut acc: Option<NodeId> = None;
    for &n in nodes {
        acc = Some(match acc {
            Some(a) => tape.add(a, n)?,
            None => n,
        });
    }
    Ok(acc)
}

/// Standard-variant loss of one segment (all `snapshots.len() - 1` steps),
/// evaluated in eval mode without noise.
pub fn loss_standard<S: Scalar>(
    model: &Model<S>,
    params_physics: &PhysicsParams,
    segment: Segment<'_>,
) -> Result<f64, TrainError> {
    if model.config().variant != ModelVariant::Standard {
        return Err(TrainError::InvalidConfig(
            "loss_standard needs the standard variant".into(),
        ));
    }
    let (total, _, _) = eval_segment_loss(model, params_physics, segment)?;
    Ok(total)
}

/// PARC loss of one segment: derivative term plus update term.
pub fn loss_parc<S: Scalar>(
    model: &Model<S>,
    params_physics: &PhysicsParams,
    segment: Segment<'_>,
) -> Result<(f64, f64, f64), TrainError> {
    if model.config().variant != ModelVariant::Parc {
        return Err(TrainError::InvalidConfig(
            "loss_parc needs the parc variant".into(),
        ));
    }
    eval_segment_loss(model, params_physics, segment)
}

/// Returns `(total, diff_term, int_term)` of one segment in eval mode.
fn eval_segment_loss<S: Scalar>(
    model: &Model<S>,
    params_physics: &PhysicsParams,
    segment: Segment<'_>,
) -> Result<(f64, f64, f64), TrainError> {
    if segment.snapshots.len() < 2 {
        return Err(TrainError::SegmentTooShort {
            n: 1,
            need: 2,
            have: segment.snapshots.len(),
        });
    }
    let n = segment.snapshots.len() - 1;
    let ctx = LossContext::new(model, params_physics.clone());
    let mut tape = Tape::new(Mode::Eval);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let loss = record_segment_loss(model, &mut tape, &ctx, segment, n, 0.0, &mut rng)?;
    let diff = match sum_nodes(&mut tape, &loss.diff_terms)? {
        Some(id) => tape.value(id).data()[0].into_f64(),
        None => 0.0,
    };
    let int = match sum_nodes(&mut tape, &loss.int_terms)? {
        Some(id) => tape.value(id).data()[0].into_f64(),
        None => 0.0,
    };
    Ok((diff + int, diff, int))
}

/// Root-mean-square difference between two states over the structural
/// support, with each component divided by its state scaling coefficient.
pub fn normalized_state_error(
    a: &LatticeState,
    b: &LatticeState,
    scaling: &ScalingCoefficients,
) -> f64 {
    let l = a.l();
    let mut sq = 0.0;
    for i in 0..l {
        sq += ((a.q[i] - b.q[i]) / scaling.q).powi(2);
        sq += ((a.p[i] - b.p[i]) / scaling.p).powi(2);
        for j in 0..l {
            let d = a.rho[[i, j]] - b.rho[[i, j]];
            sq += (d.re / scaling.r).powi(2) + (d.im / scaling.r).powi(2);
        }
    }
    (sq / (2 * l * l + 2 * l) as f64).sqrt()
}

/// Mean per-step [`normalized_state_error`] of an eval-mode rollout against
/// one ground-truth trajectory, over up to `horizon` steps.
fn validation_score<S: Scalar>(
    model: &Model<S>,
    trajectory: &[LatticeState],
    dt_prediction: f64,
    horizon: usize,
) -> Result<f64, TrainError> {
    let steps = horizon.min(trajectory.len().saturating_sub(1));
    if steps == 0 {
        return Err(TrainError::SegmentTooShort {
            n: 1,
            need: 2,
            have: trajectory.len(),
        });
    }
    match model.rollout(&trajectory[0], steps, dt_prediction) {
        Ok(predicted) => {
            let mut acc = 0.0;
            for (pred, truth) in predicted.iter().zip(trajectory).skip(1) {
                acc += normalized_state_error(pred, truth, model.scaling());
            }
            Ok(acc / steps as f64)
        }
        // A diverged rollout scores unusably bad rather than failing the
        // whole run; the stage simply will not become the best checkpoint.
        Err(ModelError::Divergence { .. }) => Ok(f64::MAX),
        Err(e) => Err(e.into()),
    }
}

/// Train `model` on the dataset's training split under the curriculum.
///
/// Per optimizer step: sample a batch of windows, add first-input noise,
/// roll out, average the segment losses, backpropagate, clip, and apply
/// AdamW with the warm-restart schedule.  After each stage the model is
/// scored by short-rollout validation on held-out trajectories and the
/// best-scoring weights are restored at the end.  Single-threaded and
/// bitwise deterministic for a fixed seed.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    dataset: &Dataset,
    config: &TrainingConfig,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let params_physics = dataset.physics_params()?;
    let dt_prediction = dataset.protocol.dt_prediction();
    let parc = model.config().variant == ModelVariant::Parc;
    if model.config().l != dataset.l {
        return Err(TrainError::InvalidConfig(format!(
            "model lattice {} vs dataset lattice {}",
            model.config().l,
            dataset.l
        )));
    }
    if parc && dataset.trajectories.iter().any(|t| t.midpoints.len() + 1 < t.snapshots.len()) {
        return Err(TrainError::MissingMidpoints {
            need: dataset
                .trajectories
                .first()
                .map(|t| t.snapshots.len() - 1)
                .unwrap_or(0),
            have: dataset
                .trajectories
                .first()
                .map(|t| t.midpoints.len())
                .unwrap_or(0),
        });
    }

    let train_set: Vec<&crate::datagen::Trajectory> = dataset.train_trajectories().collect();
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    // Held-out trajectories when the hash split yields any; otherwise fall
    // back to scoring on training trajectories so tiny datasets still get a
    // checkpoint criterion.
    let mut val_set: Vec<&crate::datagen::Trajectory> = dataset.test_trajectories().collect();
    if val_set.is_empty() {
        val_set = train_set.clone();
    }
    val_set.truncate(config.validation_trajectories);

    let lengths: Vec<(usize, usize)> = train_set
        .iter()
        .enumerate()
        .map(|(pos, t)| (pos, t.snapshots.len()))
        .collect();

    // Cycle lengths per stage, for the warm-restart schedule.
    let mut cycle_lengths = Vec::with_capacity(config.stages.len());
    for stage in &config.stages {
        let total_windows: usize = lengths
            .iter()
            .map(|&(_, len)| {
                len.checked_sub(stage.rollout_steps)
                    .filter(|&w| w > 0)
                    .unwrap_or(0)
            })
            .sum();
        if total_windows == 0 {
            return Err(TrainError::SegmentTooShort {
                n: stage.rollout_steps,
                need: stage.rollout_steps + 1,
                have: lengths.iter().map(|&(_, l)| l).max().unwrap_or(0),
            });
        }
        let mut per_epoch = total_windows.div_ceil(config.batch_size);
        if let Some(cap) = config.steps_per_epoch {
            per_epoch = per_epoch.min(cap);
        }
        cycle_lengths.push(per_epoch * stage.n_epochs);
    }
    let schedule = LrSchedule::new(
        config.lr_max,
        config.lr_min,
        config.warmup_steps,
        cycle_lengths.clone(),
    )?;

    let ctx = LossContext::new(model, params_physics);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt_state = OptimizerState::new(model.params());
    let mut metrics = Vec::new();
    let mut stage_validation = Vec::with_capacity(config.stages.len());
    let mut best: Option<(f64, usize, crate::tensor::ParamSet<S>)> = None;
    let mut global_step = 0usize;

    for (stage_idx, stage) in config.stages.iter().enumerate() {
        for _epoch in 0..stage.n_epochs {
            let batches = make_batches(
                &lengths,
                stage.rollout_steps,
                config.batch_size,
                config.steps_per_epoch,
                &mut rng,
            )?;
            for batch in batches {
                let mut tape = Tape::new(Mode::Train);
                let mut diff_terms = Vec::new();
                let mut int_terms = Vec::new();
                for window in &batch {
                    let traj = train_set[window.trajectory];
                    let end = window.start + stage.rollout_steps;
                    let segment = Segment {
                        snapshots: &traj.snapshots[window.start..=end],
                        midpoints: if parc {
                            &traj.midpoints[window.start..end]
                        } else {
                            &[]
                        },
                    };
                    let seg_loss = record_segment_loss(
                        model,
                        &mut tape,
                        &ctx,
                        segment,
                        stage.rollout_steps,
                        stage.noise_sigma,
                        &mut rng,
                    )?;
                    diff_terms.extend(seg_loss.diff_terms);
                    int_terms.extend(seg_loss.int_terms);
                }
                let inv_batch = 1.0 / batch.len() as f64;
                let diff_node = match sum_nodes(&mut tape, &diff_terms)? {
                    Some(id) => Some(tape.scale(id, inv_batch)?),
                    None => None,
                };
                let int_node = sum_nodes(&mut tape, &int_terms)?
                    .map(|id| tape.scale(id, inv_batch))
                    .transpose()?;
                let int_node = int_node.ok_or(TrainError::EmptyTrainSplit)?;
                let loss_node = match diff_node {
                    Some(d) => tape.add(d, int_node)?,
                    None => int_node,
                };

                let loss_total = tape.value(loss_node).data()[0].into_f64();
                let loss_diff = diff_node
                    .map(|d| tape.value(d).data()[0].into_f64())
                    .unwrap_or(0.0);
                let loss_int = tape.value(int_node).data()[0].into_f64();
                if !loss_total.is_finite() {
                    return Err(TrainError::Diverged {
                        stage: stage_idx,
                        step: global_step,
                    });
                }

                tape.backward(loss_node, model.params_mut())?;
                let grad_norm = global_grad_norm(model.params())?;
                clip_gradients(model.params_mut(), config.clip_max_norm)?;
                let lr = schedule.lr_at(global_step);
                let hyper = AdamWConfig {
                    lr,
                    beta1: config.beta1,
                    beta2: config.beta2,
                    eps: config.adam_eps,
                    weight_decay: config.weight_decay,
                };
                adamw_step(model.params_mut(), &mut opt_state, &hyper)?;

                metrics.push(MetricsRow {
                    step: global_step,
                    stage: stage_idx,
                    lr,
                    loss_total,
                    loss_diff_term: loss_diff,
                    loss_int_term: loss_int,
                    grad_norm,
                });
                global_step += 1;
            }
        }

        // Stage validation: short-rollout error on held-out trajectories.
        let mut score_acc = 0.0;
        for traj in &val_set {
            score_acc += validation_score(
                model,
                &traj.snapshots,
                dt_prediction,
                config.validation_horizon,
            )?;
        }
        let score = score_acc / val_set.len() as f64;
        stage_validation.push(score);
        let better = best.as_ref().map(|(s, _, _)| score < *s).unwrap_or(true);
        if better {
            best = Some((score, stage_idx, model.params().clone()));
        }
    }

    let (_, best_stage, best_params) = best.expect("at least one stage");
    *model.params_mut() = best_params;
    Ok(TrainReport {
        metrics,
        stage_validation,
        best_stage,
    })
}

fn global_grad_norm<S: Scalar>(params: &crate::tensor::ParamSet<S>) -> Result<f64, TrainError> {
    let mut sq = 0.0;
    for entry in params.iter() {
        let grad = entry.grad.as_ref().ok_or_else(|| TensorError::MissingGrad {
            name: entry.name.clone(),
        })?;
        for &g in grad.data() {
            let g = g.into_f64();
            sq += g * g;
        }
    }
    Ok(sq.sqrt())
}
