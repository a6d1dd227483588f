//! Surrogate models: state-tensor embedding, the residual CNN, the standard
//! one-network recurrent step, and the PARC differentiator–integrator step.
//!
//! A physical state `(rho, Q, P)` is embedded as a `[4, L, L]` tensor —
//! channels `(Re rho, Im rho, diag Q, diag P)`, with the `Q`/`P` channels
//! zero off the diagonal — and extracted back in the reverse manner; any
//! off-diagonal content the network writes into channels 2 and 3 is
//! discarded.  Both model variants share one CNN shape (stem convolution,
//! pre-activation residual blocks, head convolution) and wrap it with the
//! dataset's nine scaling coefficients as fixed, non-trainable constants:
//! inputs are divided by the state maxima so the network sees values in
//! roughly `[-1, 1]`, outputs are multiplied back by the derivative- or
//! update-maxima.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, Checkpoint, ContainerError, NamedTensor};
use crate::datagen::ScalingCoefficients;
use crate::dynamics::LatticeState;
use crate::tensor::{
    init_uniform, Mode, NodeId, ParamSet, Scalar, Tape, Tensor, TensorError,
};

/// Channels of the embedded state tensor.
pub const STATE_CHANNELS: usize = 4;

/// Layer-norm variance guard.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Errors from model construction, inference, and checkpointing.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("rollout diverged (non-finite state) at prediction step {step}")]
    Divergence { step: usize },
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
}

/// Which recurrent mapping the model implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// One CNN predicting the state update directly.
    Standard,
    /// Two CNNs: a differentiator estimating the mid-interval time
    /// derivative and an integrator turning it into the update.
    Parc,
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelVariant::Standard => write!(f, "standard"),
            ModelVariant::Parc => write!(f, "parc"),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub l: usize,
    pub hidden_channels: usize,
    pub n_blocks: usize,
    pub kernel: usize,
    pub dropout_p: f64,
    pub variant: ModelVariant,
}

impl ModelConfig {
    /// Default-sized standard model.
    pub fn standard(l: usize) -> Self {
        Self {
            l,
            hidden_channels: 12,
            n_blocks: 2,
            kernel: 3,
            dropout_p: 0.1,
            variant: ModelVariant::Standard,
        }
    }

    /// Default-sized PARC model.
    pub fn parc(l: usize) -> Self {
        Self {
            variant: ModelVariant::Parc,
            ..Self::standard(l)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.l < crate::dynamics::MIN_LATTICE || self.l % 2 != 0 {
            return Err(ModelError::InvalidConfig(format!("lattice size {}", self.l)));
        }
        if self.hidden_channels == 0 || self.n_blocks == 0 {
            return Err(ModelError::InvalidConfig(
                "hidden_channels and n_blocks must be positive".into(),
            ));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "kernel must be odd, got {}",
                self.kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout_p = {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Trainable scalar count of one CNN of this shape.
    fn cnn_parameter_count(&self) -> usize {
        let (h, c, k2) = (self.hidden_channels, STATE_CHANNELS, self.kernel * self.kernel);
        let stem = h * c * k2 + h;
        let block = 2 * (2 * h) + 2 * (h * h * k2 + h);
        let head = c * h * k2 + c;
        stem + self.n_blocks * block + head
    }

    /// Total trainable scalar count (PARC holds two CNNs).
    pub fn parameter_count(&self) -> usize {
        match self.variant {
            ModelVariant::Standard => self.cnn_parameter_count(),
            ModelVariant::Parc => 2 * self.cnn_parameter_count(),
        }
    }
}

/// Parameter slots of one residual block.
#[derive(Debug, Clone, Copy)]
struct BlockSlots {
    ln1_gain: usize,
    ln1_bias: usize,
    conv1_w: usize,
    conv1_b: usize,
    ln2_gain: usize,
    ln2_bias: usize,
    conv2_w: usize,
    conv2_b: usize,
}

/// Parameter slots of one CNN.
#[derive(Debug, Clone)]
struct CnnSlots {
    stem_w: usize,
    stem_b: usize,
    blocks: Vec<BlockSlots>,
    head_w: usize,
    head_b: usize,
}

/// A surrogate model: config, parameters, and the frozen scaling constants.
#[derive(Debug, Clone)]
pub struct Model<S> {
    config: ModelConfig,
    scaling: ScalingCoefficients,
    params: ParamSet<S>,
    nets: Vec<CnnSlots>,
}

/// Nodes a single recorded model step exposes to the loss.
#[derive(Debug, Clone, Copy)]
pub struct StepNodes {
    /// Normalized state update (after structural masking), `[4, L, L]`.
    pub update_normalized: NodeId,
    /// Normalized mid-interval derivative estimate (PARC only).
    pub derivative_normalized: Option<NodeId>,
    /// Next state in physical units, `[4, L, L]`.
    pub next_state: NodeId,
}

fn network_prefixes(variant: ModelVariant) -> &'static [&'static str] {
    match variant {
        ModelVariant::Standard => &[""],
        ModelVariant::Parc => &["diff.", "int."],
    }
}

impl<S: Scalar> Model<S> {
    /// Fresh model with uniformly initialized kernels (zero biases, identity
    /// layer norms).
    pub fn new(
        config: ModelConfig,
        scaling: ScalingCoefficients,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        for (name, value) in scaling.named() {
            if !(value.is_finite() && value > 0.0) {
                return Err(ModelError::InvalidConfig(format!(
                    "scaling coefficient {name} = {value} must be positive"
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut nets = Vec::new();
        for prefix in network_prefixes(config.variant) {
            nets.push(build_cnn_params(&config, prefix, &mut params, &mut rng)?);
        }
        Ok(Self {
            config,
            scaling,
            params,
            nets,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn scaling(&self) -> &ScalingCoefficients {
        &self.scaling
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Total trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Per-channel factors dividing a state tensor into normalized units.
    pub fn state_normalizers(&self) -> [f64; 4] {
        let s = &self.scaling;
        [1.0 / s.r, 1.0 / s.r, 1.0 / s.q, 1.0 / s.p]
    }

    fn derivative_scales(&self) -> [f64; 4] {
        let s = &self.scaling;
        [s.r_d, s.r_d, s.q_d, s.p_d]
    }

    fn derivative_normalizers(&self) -> [f64; 4] {
        let s = &self.scaling;
        [1.0 / s.r_d, 1.0 / s.r_d, 1.0 / s.q_d, 1.0 / s.p_d]
    }

    fn update_scales(&self) -> [f64; 4] {
        let s = &self.scaling;
        [s.r_delta, s.r_delta, s.q_delta, s.p_delta]
    }

    /// Run one CNN (by index) on a recorded `[4, L, L]` input.
    fn cnn_forward(
        &self,
        tape: &mut Tape<S>,
        net: usize,
        input: NodeId,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, ModelError> {
        let slots = &self.nets[net];
        let stem_w = tape.param(&self.params, slots.stem_w)?;
        let stem_b = tape.param(&self.params, slots.stem_b)?;
        let mut x = tape.conv2d_circular(input, stem_w, stem_b)?;
        for block in &slots.blocks {
            let ln1_g = tape.param(&self.params, block.ln1_gain)?;
            let ln1_b = tape.param(&self.params, block.ln1_bias)?;
            let mut y = tape.layer_norm(x, ln1_g, ln1_b, LAYER_NORM_EPS)?;
            y = tape.tanh(y)?;
            let c1w = tape.param(&self.params, block.conv1_w)?;
            let c1b = tape.param(&self.params, block.conv1_b)?;
            y = tape.conv2d_circular(y, c1w, c1b)?;
            let ln2_g = tape.param(&self.params, block.ln2_gain)?;
            let ln2_b = tape.param(&self.params, block.ln2_bias)?;
            y = tape.layer_norm(y, ln2_g, ln2_b, LAYER_NORM_EPS)?;
            y = tape.tanh(y)?;
            y = tape.channel_dropout(y, self.config.dropout_p, rng)?;
            let c2w = tape.param(&self.params, block.conv2_w)?;
            let c2b = tape.param(&self.params, block.conv2_b)?;
            y = tape.conv2d_circular(y, c2w, c2b)?;
            x = tape.add(x, y)?;
        }
        let head_w = tape.param(&self.params, slots.head_w)?;
        let head_b = tape.param(&self.params, slots.head_b)?;
        Ok(tape.conv2d_circular(x, head_w, head_b)?)
    }

    /// Record one recurrent step on `tape` from a physical-units state node.
    ///
    /// The three scaling stages share this single code path for both
    /// variants and for training and inference alike: normalize the input by
    /// the state maxima, run the CNN(s), mask the structurally-zero entries
    /// of the `Q`/`P` channels out of the raw output, and rescale.  For PARC
    /// the differentiator output is unscaled to a physical derivative and
    /// immediately re-normalized for the integrator, so the composed step
    /// equals the two exposed operators applied in sequence, bit for bit.
    pub fn step_on_tape(
        &self,
        tape: &mut Tape<S>,
        input: NodeId,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepNodes, ModelError> {
        let shape = tape.value(input).shape();
        let l = self.config.l;
        if shape != [STATE_CHANNELS, l, l] {
            return Err(ModelError::ShapeMismatch(format!(
                "state tensor {shape:?}, config wants [{STATE_CHANNELS}, {l}, {l}]"
            )));
        }
        let mask = structural_mask::<S>(l);
        let x = tape.channel_scale(input, &self.state_normalizers())?;
        match self.config.variant {
            ModelVariant::Standard => {
                let raw = self.cnn_forward(tape, 0, x, rng)?;
                let update_norm = tape.mul_mask(raw, &mask)?;
                let update_phys = tape.channel_scale(update_norm, &self.update_scales())?;
                let next_state = tape.add(input, update_phys)?;
                Ok(StepNodes {
                    update_normalized: update_norm,
                    derivative_normalized: None,
                    next_state,
                })
            }
            ModelVariant::Parc => {
                let raw_d = self.cnn_forward(tape, 0, x, rng)?;
                let d_norm = tape.mul_mask(raw_d, &mask)?;
                let d_phys = tape.channel_scale(d_norm, &self.derivative_scales())?;
                let d_renorm = tape.channel_scale(d_phys, &self.derivative_normalizers())?;
                let raw_u = self.cnn_forward(tape, 1, d_renorm, rng)?;
                let update_norm = tape.mul_mask(raw_u, &mask)?;
                let update_phys = tape.channel_scale(update_norm, &self.update_scales())?;
                let next_state = tape.add(input, update_phys)?;
                Ok(StepNodes {
                    update_normalized: update_norm,
                    derivative_normalized: Some(d_norm),
                    next_state,
                })
            }
        }
    }

    /// One inference step in eval mode: physical state in, physical state
    /// out.  The returned state carries `time + dt_prediction`.
    pub fn predict_step(
        &self,
        state: &LatticeState,
        dt_prediction: f64,
    ) -> Result<LatticeState, ModelError> {
        let mut tape = Tape::new(Mode::Eval);
        let input = tape.constant(embed_state::<S>(&state.rho, &state.q, &state.p)?)?;
        // Dropout is inert in eval mode; the RNG is never consulted.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nodes = self.step_on_tape(&mut tape, input, &mut rng)?;
        let (rho, q, p) = extract_state(tape.value(nodes.next_state))?;
        Ok(LatticeState::from_parts_unchecked(
            q,
            p,
            rho,
            state.time + dt_prediction,
        ))
    }

    /// The PARC differentiator as a standalone operator: physical state in,
    /// physical mid-interval derivative estimate out.
    pub fn parc_differentiate(
        &self,
        state: &LatticeState,
    ) -> Result<(Array2<Complex64>, Array1<f64>, Array1<f64>), ModelError> {
        if self.config.variant != ModelVariant::Parc {
            return Err(ModelError::InvalidConfig(
                "parc_differentiate needs the parc variant".into(),
            ));
        }
        let mut tape = Tape::new(Mode::Eval);
        let input = tape.constant(embed_state::<S>(&state.rho, &state.q, &state.p)?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = structural_mask::<S>(self.config.l);
        let x = tape.channel_scale(input, &self.state_normalizers())?;
        let raw_d = self.cnn_forward(&mut tape, 0, x, &mut rng)?;
        let d_norm = tape.mul_mask(raw_d, &mask)?;
        let d_phys = tape.channel_scale(d_norm, &self.derivative_scales())?;
        extract_state(tape.value(d_phys)).map_err(ModelError::from)
    }

    /// The PARC integrator as a standalone operator: physical derivative in,
    /// physical state update out.
    pub fn parc_integrate(
        &self,
        drho: &Array2<Complex64>,
        dq: &Array1<f64>,
        dp: &Array1<f64>,
    ) -> Result<(Array2<Complex64>, Array1<f64>, Array1<f64>), ModelError> {
        if self.config.variant != ModelVariant::Parc {
            return Err(ModelError::InvalidConfig(
                "parc_integrate needs the parc variant".into(),
            ));
        }
        let mut tape = Tape::new(Mode::Eval);
        let input = tape.constant(embed_state::<S>(drho, dq, dp)?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = structural_mask::<S>(self.config.l);
        let d_renorm = tape.channel_scale(input, &self.derivative_normalizers())?;
        let raw_u = self.cnn_forward(&mut tape, 1, d_renorm, &mut rng)?;
        let update_norm = tape.mul_mask(raw_u, &mask)?;
        let update_phys = tape.channel_scale(update_norm, &self.update_scales())?;
        extract_state(tape.value(update_phys)).map_err(ModelError::from)
    }

    /// Recurrent eval-mode rollout: `n_steps` applications of the step,
    /// returning all `n_steps + 1` states (initial included).  A non-finite
    /// state aborts with a divergence error naming the prediction step.
    pub fn rollout(
        &self,
        initial: &LatticeState,
        n_steps: usize,
        dt_prediction: f64,
    ) -> Result<Vec<LatticeState>, ModelError> {
        let mut states = Vec::with_capacity(n_steps + 1);
        states.push(initial.clone());
        for step in 1..=n_steps {
            let next = self.predict_step(states.last().expect("non-empty"), dt_prediction);
            match next {
                Ok(state) => states.push(state),
                Err(ModelError::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(ModelError::Divergence { step })
                }
                Err(e) => return Err(e),
            }
        }
        Ok(states)
    }

    /// Serialize config, scaling, and weights to the binary checkpoint
    /// container (float32 payload).
    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), ModelError> {
        let meta = serde_json::json!({
            "format": "holstein-model",
            "scalar": S::NAME,
            "config": self.config,
            "scaling": self.scaling,
        });
        let tensors = self
            .params
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                data: e.value.data().iter().map(|x| x.into_f64() as f32).collect(),
            })
            .collect();
        let checkpoint = Checkpoint { meta, tensors };
        container::write_checkpoint(path, &checkpoint)?;
        Ok(())
    }

    /// Load a checkpoint written by [`Model::save_checkpoint`], verifying
    /// config consistency and tensor shapes.
    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self, ModelError> {
        let checkpoint = container::read_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(
            checkpoint
                .meta
                .get("config")
                .cloned()
                .ok_or_else(|| ModelError::Checkpoint("missing config in metadata".into()))?,
        )
        .map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
        let scaling: ScalingCoefficients = serde_json::from_value(
            checkpoint
                .meta
                .get("scaling")
                .cloned()
                .ok_or_else(|| ModelError::Checkpoint("missing scaling in metadata".into()))?,
        )
        .map_err(|e| ModelError::Checkpoint(format!("scaling: {e}")))?;

        let mut model = Model::<S>::new(config, scaling, 0)?;
        if checkpoint.tensors.len() != model.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint holds {} tensors, architecture wants {}",
                checkpoint.tensors.len(),
                model.params.len()
            )));
        }
        for stored in &checkpoint.tensors {
            let slot = model.params.slot_of(&stored.name).ok_or_else(|| {
                ModelError::Checkpoint(format!("unknown tensor {:?}", stored.name))
            })?;
            let entry = model.params.entry_mut(slot);
            if entry.value.shape() != stored.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {:?}: shape {:?} vs architecture {:?}",
                    stored.name,
                    stored.shape,
                    entry.value.shape()
                )));
            }
            entry.value = Tensor::from_vec(
                &stored.shape,
                stored.data.iter().map(|&x| S::from_f64(x as f64)).collect(),
            )?;
        }
        Ok(model)
    }
}

fn build_cnn_params<S: Scalar>(
    config: &ModelConfig,
    prefix: &str,
    params: &mut ParamSet<S>,
    rng: &mut ChaCha8Rng,
) -> Result<CnnSlots, ModelError> {
    let (h, c, k) = (config.hidden_channels, STATE_CHANNELS, config.kernel);
    let conv = |params: &mut ParamSet<S>,
                rng: &mut ChaCha8Rng,
                name: String,
                c_out: usize,
                c_in: usize|
     -> Result<(usize, usize), ModelError> {
        let w = params.add(
            &format!("{name}.weight"),
            init_uniform(&[c_out, c_in, k, k], c_in * k * k, rng),
        )?;
        let b = params.add(&format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok((w, b))
    };
    let layer_norm = |params: &mut ParamSet<S>, name: String| -> Result<(usize, usize), ModelError> {
        let gain = params.add(
            &format!("{name}.gain"),
            Tensor::from_vec(&[h], vec![S::one(); h])?,
        )?;
        let bias = params.add(&format!("{name}.bias"), Tensor::zeros(&[h]))?;
        Ok((gain, bias))
    };

    let (stem_w, stem_b) = conv(params, rng, format!("{prefix}stem"), h, c)?;
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for i in 0..config.n_blocks {
        let (ln1_gain, ln1_bias) = layer_norm(params, format!("{prefix}block{i}.ln1"))?;
        let (conv1_w, conv1_b) = conv(params, rng, format!("{prefix}block{i}.conv1"), h, h)?;
        let (ln2_gain, ln2_bias) = layer_norm(params, format!("{prefix}block{i}.ln2"))?;
        let (conv2_w, conv2_b) = conv(params, rng, format!("{prefix}block{i}.conv2"), h, h)?;
        blocks.push(BlockSlots {
            ln1_gain,
            ln1_bias,
            conv1_w,
            conv1_b,
            ln2_gain,
            ln2_bias,
            conv2_w,
            conv2_b,
        });
    }
    let (head_w, head_b) = conv(params, rng, format!("{prefix}head"), c, h)?;
    Ok(CnnSlots {
        stem_w,
        stem_b,
        blocks,
        head_w,
        head_b,
    })
}

/// Embed `(rho, Q, P)` as a `[4, L, L]` tensor: channel 0 = Re rho, 1 =
/// Im rho, 2 = diag(Q), 3 = diag(P), zeros elsewhere.
pub fn embed_state<S: Scalar>(
    rho: &Array2<Complex64>,
    q: &Array1<f64>,
    p: &Array1<f64>,
) -> Result<Tensor<S>, TensorError> {
    let l = q.len();
    if rho.dim() != (l, l) || p.len() != l {
        return Err(TensorError::ShapeMismatch {
            op: "embed_state",
            detail: format!("rho {:?}, Q {}, P {}", rho.dim(), q.len(), p.len()),
        });
    }
    let ll = l * l;
    let mut data = vec![S::zero(); STATE_CHANNELS * ll];
    for i in 0..l {
        for j in 0..l {
            let z = rho[[i, j]];
            data[i * l + j] = S::from_f64(z.re);
            data[ll + i * l + j] = S::from_f64(z.im);
        }
        data[2 * ll + i * l + i] = S::from_f64(q[i]);
        data[3 * ll + i * l + i] = S::from_f64(p[i]);
    }
    Tensor::from_vec(&[STATE_CHANNELS, l, l], data)
}

/// Extract `(rho, Q, P)` from a `[4, L, L]` tensor, discarding off-diagonal
/// content of the `Q`/`P` channels.
pub fn extract_state<S: Scalar>(
    tensor: &Tensor<S>,
) -> Result<(Array2<Complex64>, Array1<f64>, Array1<f64>), TensorError> {
    let shape = tensor.shape();
    if shape.len() != 3 || shape[0] != STATE_CHANNELS || shape[1] != shape[2] {
        return Err(TensorError::ShapeMismatch {
            op: "extract_state",
            detail: format!("{shape:?}"),
        });
    }
    let l = shape[1];
    let ll = l * l;
    let data = tensor.data();
    let mut rho = Array2::<Complex64>::zeros((l, l));
    let mut q = Array1::<f64>::zeros(l);
    let mut p = Array1::<f64>::zeros(l);
    for i in 0..l {
        for j in 0..l {
            rho[[i, j]] = Complex64::new(
                data[i * l + j].into_f64(),
                data[ll + i * l + j].into_f64(),
            );
        }
        q[i] = data[2 * ll + i * l + i].into_f64();
        p[i] = data[3 * ll + i * l + i].into_f64();
    }
    Ok((rho, q, p))
}

/// The structural support of an embedded state: ones on channels 0 and 1,
/// ones on the diagonals of channels 2 and 3, zeros elsewhere.
pub fn structural_mask<S: Scalar>(l: usize) -> Tensor<S> {
    let ll = l * l;
    let mut data = vec![S::zero(); STATE_CHANNELS * ll];
    for idx in 0..2 * ll {
        data[idx] = S::one();
    }
    for i in 0..l {
        data[2 * ll + i * l + i] = S::one();
        data[3 * ll + i * l + i] = S::one();
    }
    Tensor::from_vec(&[STATE_CHANNELS, l, l], data).expect("static shape")
}
