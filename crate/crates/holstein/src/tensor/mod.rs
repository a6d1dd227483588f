//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! The engine provides exactly the layer set the surrogate architecture
//! needs — circular 2-D convolution, channel-axis layer normalization,
//! channel dropout, `tanh`, and the handful of arithmetic ops the losses are
//! built from — plus the AdamW optimizer, global gradient clipping, and a
//! cosine-annealing learning-rate schedule with warm restarts.
//!
//! Computations are recorded on a [`Tape`]: an append-only arena whose
//! insertion order is a topological order of the data flow, so the backward
//! pass is a single reverse sweep.  Parameters live outside the tape in a
//! [`ParamSet`]; a forward pass copies their current values into leaf nodes,
//! and [`Tape::backward`] writes gradients back by slot.  Gradients are
//! overwritten on each backward call, never accumulated across calls, and the
//! tape is consumed by the traversal.
//!
//! Every op checks its output for non-finite values and fails loudly instead
//! of letting NaNs propagate.

mod optim;
mod tape;

pub use optim::{adamw_step, clip_gradients, AdamWConfig, LrSchedule, OptimizerState};
pub use tape::{Mode, NodeId, Tape};

use num_traits::{Float, NumCast, ToPrimitive};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Errors from tensor construction, tape recording, and optimization.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward called on a tensor the tape did not compute (constant or detached)")]
    DetachedBackward,
    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("parameter {name:?} has no gradient (run backward first)")]
    MissingGrad { name: String },
}

/// Real scalar the engine is generic over.  Training defaults to `f32`;
/// gradient checks run in `f64`.
pub trait Scalar:
    Float + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    /// Type label stored in checkpoint metadata.
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 -> scalar conversion")
    }

    fn into_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("scalar -> f64 conversion")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Zero-filled tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    /// Tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {shape:?} wants {expected} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Tensor of the given shape from an `f64` buffer.
    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Self::from_vec(shape, data.iter().map(|&x| S::from_f64(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Copy of the values widened to `f64`.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.into_f64()).collect()
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Convert between scalar precisions through `f64`.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::from_f64(x.into_f64())).collect(),
        }
    }
}

/// One named trainable tensor with its (post-backward) gradient.
#[derive(Debug, Clone)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
}

/// The set of trainable tensors of a model, addressed by stable slot index.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    /// Register a tensor; returns its slot.  Names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor<S>) -> Result<usize, TensorError> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(TensorError::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: None,
        });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, slot: usize) -> &ParamEntry<S> {
        &self.entries[slot]
    }

    pub fn entry_mut(&mut self, slot: usize) -> &mut ParamEntry<S> {
        &mut self.entries[slot]
    }

    pub fn value(&self, slot: usize) -> &Tensor<S> {
        &self.entries[slot].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<S>> {
        self.entries.iter()
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Drop all gradients.
    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Convert the whole set (values only) to another precision.
    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: None,
                })
                .collect(),
        }
    }
}

/// Kernel initialization: symmetric uniform scaled by `1/sqrt(fan_in)`.
pub fn init_uniform<S: Scalar>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| S::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Maximum relative disagreement between analytic gradients and central
/// finite differences on `n_samples` randomly chosen parameter entries.
///
/// `loss_builder` must record the same deterministic loss on any fresh tape
/// for given parameter values (eval mode, fixed inputs).  Relative error is
/// measured against `max(|analytic|, |numeric|, floor)` with a small floor so
/// near-zero gradients are compared absolutely.
pub fn finite_difference_max_rel_error<F>(
    params: &mut ParamSet<f64>,
    mut loss_builder: F,
    n_samples: usize,
    h: f64,
    seed: u64,
) -> Result<f64, TensorError>
where
    F: FnMut(&ParamSet<f64>, &mut Tape<f64>) -> Result<NodeId, TensorError>,
{
    let eval = |params: &ParamSet<f64>, builder: &mut F| -> Result<f64, TensorError> {
        let mut tape = Tape::new(Mode::Eval);
        let loss = builder(params, &mut tape)?;
        Ok(tape.value(loss).data()[0])
    };

    // Analytic gradients.
    let mut tape = Tape::new(Mode::Eval);
    let loss = loss_builder(params, &mut tape)?;
    tape.backward(loss, params)?;
    let grads: Vec<Tensor<f64>> = params
        .iter()
        .map(|e| {
            e.grad
                .clone()
                .ok_or_else(|| TensorError::MissingGrad { name: e.name.clone() })
        })
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..n_samples {
        let slot = rng.gen_range(0..params.len());
        let idx = rng.gen_range(0..params.value(slot).len());
        let orig = params.value(slot).data()[idx];

        params.entry_mut(slot).value.data_mut()[idx] = orig + h;
        let plus = eval(params, &mut loss_builder)?;
        params.entry_mut(slot).value.data_mut()[idx] = orig - h;
        let minus = eval(params, &mut loss_builder)?;
        params.entry_mut(slot).value.data_mut()[idx] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads[slot].data()[idx];
        let denom = analytic.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Maximum relative disagreement between the analytic directional derivative
/// `<grad, v>` and its central finite difference along `n_directions` random
/// unit directions spanning all parameters.
///
/// Per-entry finite differences bottom out at the oracle's own noise floor
/// (`ulp(loss)/2h`) for entries whose gradient is tiny; the directional form
/// compares quantities of size `~|grad|`, far above that floor, while still
/// exercising every parameter in every probe — a wrong gradient component
/// perturbs `<grad, v>` with probability one under random `v`.
pub fn directional_derivative_max_rel_error<F>(
    params: &mut ParamSet<f64>,
    mut loss_builder: F,
    n_directions: usize,
    h: f64,
    seed: u64,
) -> Result<f64, TensorError>
where
    F: FnMut(&ParamSet<f64>, &mut Tape<f64>) -> Result<NodeId, TensorError>,
{
    let eval = |params: &ParamSet<f64>, builder: &mut F| -> Result<f64, TensorError> {
        let mut tape = Tape::new(Mode::Eval);
        let loss = builder(params, &mut tape)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new(Mode::Eval);
    let loss = loss_builder(params, &mut tape)?;
    tape.backward(loss, params)?;
    let grads: Vec<Tensor<f64>> = params
        .iter()
        .map(|e| {
            e.grad
                .clone()
                .ok_or_else(|| TensorError::MissingGrad { name: e.name.clone() })
        })
        .collect::<Result<_, _>>()?;
    let originals: Vec<Tensor<f64>> = params.iter().map(|e| e.value.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..n_directions {
        // Unit direction over the concatenated parameter vector.
        let mut direction: Vec<Vec<f64>> = originals
            .iter()
            .map(|t| (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let norm: f64 = direction
            .iter()
            .flat_map(|v| v.iter().map(|x| x * x))
            .sum::<f64>()
            .sqrt();
        for v in &mut direction {
            for x in v.iter_mut() {
                *x /= norm;
            }
        }

        let mut analytic = 0.0;
        for (g, v) in grads.iter().zip(&direction) {
            for (gi, vi) in g.data().iter().zip(v) {
                analytic += gi * vi;
            }
        }

        let displace = |params: &mut ParamSet<f64>, sign: f64| {
            for slot in 0..params.len() {
                let entry = params.entry_mut(slot);
                for (w, (o, v)) in entry
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(originals[slot].data().iter().zip(&direction[slot]))
                {
                    *w = o + sign * h * v;
                }
            }
        };
        displace(params, 1.0);
        let plus = eval(params, &mut loss_builder)?;
        displace(params, -1.0);
        let minus = eval(params, &mut loss_builder)?;

        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    for slot in 0..params.len() {
        params.entry_mut(slot).value = originals[slot].clone();
    }
    Ok(worst)
}

use rand::SeedableRng;
