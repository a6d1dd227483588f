//! The recording tape: forward op evaluation plus the reverse sweep.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ParamSet, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Whether stochastic layers (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<S> {
    /// Leaf with no gradient of its own.
    Constant,
    /// Leaf bound to a [`ParamSet`] slot; backward writes its gradient there.
    Param { slot: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Multiply by a scalar constant.
    Scale(NodeId, S),
    /// Elementwise multiply by a constant tensor (masks, dropout masks).
    MulConst(NodeId, Tensor<S>),
    /// Multiply channel `c` of a `[C, H, W]` tensor by `factors[c]`.
    ChannelScale(NodeId, Vec<S>),
    Tanh(NodeId),
    Square(NodeId),
    /// Elementwise square root; backward treats exact zeros as flat.
    Sqrt(NodeId),
    /// Sum of all entries, yielding shape `[1]`.
    Sum(NodeId),
    Conv2dCircular {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    LayerNorm {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
}

/// Append-only computation arena.  Node insertion order is a topological
/// order of the recorded graph, so [`Tape::backward`] is one reverse sweep.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    mode: Mode,
}

impl<S: Scalar> Tape<S> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, opname: &'static str) -> Result<NodeId, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: opname });
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Record an input tensor that needs no gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<NodeId, TensorError> {
        self.push(Op::Constant, value, "constant")
    }

    /// Record the current value of a parameter slot as a differentiable leaf.
    pub fn param(&mut self, params: &ParamSet<S>, slot: usize) -> Result<NodeId, TensorError> {
        let value = params.value(slot).clone();
        self.push(Op::Param { slot }, value, "param")
    }

    fn binary_shapes(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_shapes("add", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o + x;
        }
        self.push(Op::Add(a, b), out, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_shapes("sub", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o - x;
        }
        self.push(Op::Sub(a, b), out, "sub")
    }

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        let c = S::from_f64(factor);
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = *o * c;
        }
        self.push(Op::Scale(a, c), out, "scale")
    }

    /// Elementwise multiply by a constant tensor of the same shape.
    pub fn mul_mask(&mut self, a: NodeId, mask: &Tensor<S>) -> Result<NodeId, TensorError> {
        if self.value(a).shape() != mask.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_mask",
                detail: format!("{:?} vs mask {:?}", self.value(a).shape(), mask.shape()),
            });
        }
        let mut out = self.value(a).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(mask.data()) {
            *o = *o * m;
        }
        self.push(Op::MulConst(a, mask.clone()), out, "mul_mask")
    }

    /// Multiply each channel of a `[C, H, W]` tensor by a constant factor.
    pub fn channel_scale(&mut self, a: NodeId, factors: &[f64]) -> Result<NodeId, TensorError> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 3 || shape[0] != factors.len() {
            return Err(TensorError::ShapeMismatch {
                op: "channel_scale",
                detail: format!("shape {shape:?} vs {} factors", factors.len()),
            });
        }
        let fs: Vec<S> = factors.iter().map(|&f| S::from_f64(f)).collect();
        let per_channel = shape[1] * shape[2];
        let mut out = self.value(a).clone();
        for (c, &f) in fs.iter().enumerate() {
            for o in &mut out.data_mut()[c * per_channel..(c + 1) * per_channel] {
                *o = *o * f;
            }
        }
        self.push(Op::ChannelScale(a, fs), out, "channel_scale")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = o.tanh();
        }
        self.push(Op::Tanh(a), out, "tanh")
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = *o * *o;
        }
        self.push(Op::Square(a), out, "square")
    }

    /// Elementwise square root.  Negative inputs surface as the non-finite
    /// check failing; an exact zero input backpropagates a zero gradient
    /// (the loss norms are zero exactly at perfect prediction and must not
    /// emit infinities there).
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = o.sqrt();
        }
        self.push(Op::Sqrt(a), out, "sqrt")
    }

    /// Sum all entries into a `[1]` tensor.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let mut acc = S::zero();
        for &x in self.value(a).data() {
            acc = acc + x;
        }
        let out = Tensor::from_vec(&[1], vec![acc])?;
        self.push(Op::Sum(a), out, "sum")
    }

    /// Channel dropout.  In eval mode, or with `p = 0`, the input node is
    /// returned untouched.  In train mode each channel survives independently
    /// with probability `1 - p` and is scaled by `1/(1-p)`; the sampled mask
    /// enters the graph as a constant, so gradients flow through survivors.
    pub fn channel_dropout(
        &mut self,
        a: NodeId,
        p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let shape = self.value(a).shape();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "channel_dropout",
                detail: format!("need [C, H, W], got {shape:?}"),
            });
        }
        let keep = 1.0 / (1.0 - p);
        let factors: Vec<f64> = (0..shape[0])
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.channel_scale(a, &factors)
    }

    /// Circular cross-correlation: `input [C_in, H, W]`, `weight
    /// [C_out, C_in, k, k]` (odd `k`), `bias [C_out]`, spatial indices
    /// wrapped modulo `H`, `W`.
    pub fn conv2d_circular(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let ishape = self.value(input).shape().to_vec();
        let wshape = self.value(weight).shape().to_vec();
        let bshape = self.value(bias).shape().to_vec();
        let mismatch = |detail: String| {
            Err(TensorError::ShapeMismatch {
                op: "conv2d_circular",
                detail,
            })
        };
        if ishape.len() != 3 || wshape.len() != 4 || bshape.len() != 1 {
            return mismatch(format!(
                "input {ishape:?}, weight {wshape:?}, bias {bshape:?}"
            ));
        }
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, k) = (wshape[0], wshape[2]);
        if wshape[1] != c_in || wshape[3] != k || bshape[0] != c_out {
            return mismatch(format!(
                "input {ishape:?}, weight {wshape:?}, bias {bshape:?}"
            ));
        }
        if k % 2 == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "kernel size must be odd, got {k}"
            )));
        }

        let inp = self.value(input).data();
        let wt = self.value(weight).data();
        let bs = self.value(bias).data();
        let mut out = vec![S::zero(); c_out * h * w];
        let half = k / 2;
        for co in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bs[co];
                    for ci in 0..c_in {
                        for dy in 0..k {
                            let iy = (y + dy + h - half) % h;
                            let irow = (ci * h + iy) * w;
                            let wrow = (((co * c_in + ci) * k) + dy) * k;
                            for dx in 0..k {
                                let ix = (x + dx + w - half) % w;
                                acc = acc + wt[wrow + dx] * inp[irow + ix];
                            }
                        }
                    }
                    out[(co * h + y) * w + x] = acc;
                }
            }
        }
        let value = Tensor::from_vec(&[c_out, h, w], out)?;
        self.push(Op::Conv2dCircular { input, weight, bias }, value, "conv2d_circular")
    }

    /// Layer normalization over the channel axis: at each spatial location
    /// the `C`-vector is normalized to zero mean and unit (biased) variance,
    /// `eps`-guarded, then per-channel affine `gain`/`bias` is applied.
    /// Normalizing over channels only keeps the op translation-equivariant
    /// on the periodic lattice.
    pub fn layer_norm(
        &mut self,
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3
            || self.value(gain).shape() != [shape[0]]
            || self.value(bias).shape() != [shape[0]]
        {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "input {shape:?}, gain {:?}, bias {:?}",
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            });
        }
        if !(eps.is_finite() && eps > 0.0) {
            return Err(TensorError::InvalidArgument(format!("layer_norm eps = {eps}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let hw = h * w;
        let inp = self.value(input).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let cn = S::from_f64(c as f64);
        let eps_s = S::from_f64(eps);
        let mut out = vec![S::zero(); c * hw];
        for pos in 0..hw {
            let mut mean = S::zero();
            for ch in 0..c {
                mean = mean + inp[ch * hw + pos];
            }
            mean = mean / cn;
            let mut var = S::zero();
            for ch in 0..c {
                let d = inp[ch * hw + pos] - mean;
                var = var + d * d;
            }
            var = var / cn;
            let inv_std = S::one() / (var + eps_s).sqrt();
            for ch in 0..c {
                let xhat = (inp[ch * hw + pos] - mean) * inv_std;
                out[ch * hw + pos] = g[ch] * xhat + b[ch];
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        self.push(Op::LayerNorm { input, gain, bias, eps }, value, "layer_norm")
    }

    /// Reverse sweep from `loss` (a `[1]` tensor), writing parameter
    /// gradients into `params`.  All previous gradients in `params` are
    /// cleared first — gradients are overwritten per call, never
    /// accumulated across calls.  The tape is consumed.
    pub fn backward(self, loss: NodeId, params: &mut ParamSet<S>) -> Result<(), TensorError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.shape() != [1] {
            return Err(TensorError::NotScalar {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        if matches!(loss_node.op, Op::Constant) {
            return Err(TensorError::DetachedBackward);
        }

        params.clear_grads();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param { slot } => {
                    let entry = params.entry_mut(*slot);
                    let tensor = Tensor::from_vec(entry.value.shape(), gout)?;
                    match &mut entry.grad {
                        // The same slot can appear as several leaves (one per
                        // forward use); their contributions add.
                        Some(existing) => {
                            for (e, x) in existing.data_mut().iter_mut().zip(tensor.data()) {
                                *e = *e + *x;
                            }
                        }
                        none => *none = Some(tensor),
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &gout);
                    accumulate(&mut grads, *b, &gout);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &gout);
                    let neg: Vec<S> = gout.iter().map(|&x| S::zero() - x).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Scale(a, c) => {
                    let g: Vec<S> = gout.iter().map(|&x| x * *c).collect();
                    accumulate(&mut grads, *a, &g);
                }
                Op::MulConst(a, mask) => {
                    let g: Vec<S> = gout
                        .iter()
                        .zip(mask.data())
                        .map(|(&x, &m)| x * m)
                        .collect();
                    accumulate(&mut grads, *a, &g);
                }
                Op::ChannelScale(a, factors) => {
                    let per_channel = gout.len() / factors.len();
                    let mut g = gout.clone();
                    for (c, &f) in factors.iter().enumerate() {
                        for x in &mut g[c * per_channel..(c + 1) * per_channel] {
                            *x = *x * f;
                        }
                    }
                    accumulate(&mut grads, *a, &g);
                }
                Op::Tanh(a) => {
                    let y = self.nodes[idx].value.data();
                    let g: Vec<S> = gout
                        .iter()
                        .zip(y)
                        .map(|(&go, &yv)| go * (S::one() - yv * yv))
                        .collect();
                    accumulate(&mut grads, *a, &g);
                }
                Op::Square(a) => {
                    let x = self.nodes[a.0].value.data();
                    let two = S::from_f64(2.0);
                    let g: Vec<S> = gout
                        .iter()
                        .zip(x)
                        .map(|(&go, &xv)| go * two * xv)
                        .collect();
                    accumulate(&mut grads, *a, &g);
                }
                Op::Sqrt(a) => {
                    let y = self.nodes[idx].value.data();
                    let half = S::from_f64(0.5);
                    let g: Vec<S> = gout
                        .iter()
                        .zip(y)
                        .map(|(&go, &yv)| {
                            if yv == S::zero() {
                                S::zero()
                            } else {
                                go * half / yv
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *a, &g);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    let g = vec![gout[0]; n];
                    accumulate(&mut grads, *a, &g);
                }
                Op::Conv2dCircular { input, weight, bias } => {
                    let ishape = self.nodes[input.0].value.shape();
                    let wshape = self.nodes[weight.0].value.shape();
                    let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
                    let (c_out, k) = (wshape[0], wshape[2]);
                    let half = k / 2;
                    let inp = self.nodes[input.0].value.data();
                    let wt = self.nodes[weight.0].value.data();
                    let mut g_in = vec![S::zero(); c_in * h * w];
                    let mut g_w = vec![S::zero(); c_out * c_in * k * k];
                    let mut g_b = vec![S::zero(); c_out];
                    for co in 0..c_out {
                        for y in 0..h {
                            for x in 0..w {
                                let go = gout[(co * h + y) * w + x];
                                g_b[co] = g_b[co] + go;
                                for ci in 0..c_in {
                                    for dy in 0..k {
                                        let iy = (y + dy + h - half) % h;
                                        let irow = (ci * h + iy) * w;
                                        let wrow = (((co * c_in + ci) * k) + dy) * k;
                                        for dx in 0..k {
                                            let ix = (x + dx + w - half) % w;
                                            g_in[irow + ix] =
                                                g_in[irow + ix] + wt[wrow + dx] * go;
                                            g_w[wrow + dx] =
                                                g_w[wrow + dx] + inp[irow + ix] * go;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *input, &g_in);
                    accumulate(&mut grads, *weight, &g_w);
                    accumulate(&mut grads, *bias, &g_b);
                }
                Op::LayerNorm { input, gain, bias, eps } => {
                    let shape = self.nodes[input.0].value.shape();
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let hw = h * w;
                    let inp = self.nodes[input.0].value.data();
                    let g_vec = self.nodes[gain.0].value.data();
                    let cn = S::from_f64(c as f64);
                    let eps_s = S::from_f64(*eps);
                    let mut g_in = vec![S::zero(); c * hw];
                    let mut g_gain = vec![S::zero(); c];
                    let mut g_bias = vec![S::zero(); c];
                    for pos in 0..hw {
                        let mut mean = S::zero();
                        for ch in 0..c {
                            mean = mean + inp[ch * hw + pos];
                        }
                        mean = mean / cn;
                        let mut var = S::zero();
                        for ch in 0..c {
                            let d = inp[ch * hw + pos] - mean;
                            var = var + d * d;
                        }
                        var = var / cn;
                        let inv_std = S::one() / (var + eps_s).sqrt();
                        // h = dL/dxhat; the standard channel-LN backward:
                        // dx = inv_std * (h - mean(h) - xhat * mean(h*xhat)).
                        let mut mean_h = S::zero();
                        let mut mean_hx = S::zero();
                        for ch in 0..c {
                            let xhat = (inp[ch * hw + pos] - mean) * inv_std;
                            let go = gout[ch * hw + pos];
                            let hch = go * g_vec[ch];
                            g_gain[ch] = g_gain[ch] + go * xhat;
                            g_bias[ch] = g_bias[ch] + go;
                            mean_h = mean_h + hch;
                            mean_hx = mean_hx + hch * xhat;
                        }
                        mean_h = mean_h / cn;
                        mean_hx = mean_hx / cn;
                        for ch in 0..c {
                            let xhat = (inp[ch * hw + pos] - mean) * inv_std;
                            let hch = gout[ch * hw + pos] * g_vec[ch];
                            g_in[ch * hw + pos] =
                                inv_std * (hch - mean_h - xhat * mean_hx);
                        }
                    }
                    accumulate(&mut grads, *input, &g_in);
                    accumulate(&mut grads, *gain, &g_gain);
                    accumulate(&mut grads, *bias, &g_bias);
                }
            }
        }

        // Parameters that sat on the tape but received no flow still get
        // (zero) gradients so the optimizer sees a complete set.
        for idx in 0..=loss.0 {
            if let Op::Param { slot } = self.nodes[idx].op {
                let entry = params.entry_mut(slot);
                if entry.grad.is_none() {
                    entry.grad = Some(Tensor::zeros(entry.value.shape()));
                }
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], id: NodeId, contribution: &[S]) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, &x) in existing.iter_mut().zip(contribution) {
                *e = *e + x;
            }
        }
        slot => *slot = Some(contribution.to_vec()),
    }
}
