use std::fmt;
use std::str::FromStr;

use super::boundary::BoundaryKind;
use super::linalg::{gemm, Mat};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; several times faster than the libm
/// routine, with absolute error near machine epsilon.
#[inline]
pub(crate) fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Relu,
    Gelu,
    Sin,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => tanh(x),
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x))),
            Activation::Sin => x.sin(),
        }
    }

    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = tanh(GELU_C * (x + GELU_A * x * x * x));
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Sin => x.cos(),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Sin => "sin",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "sin" => Ok(Activation::Sin),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

/// Per-dimension box squashing applied as the last generator layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryLayer {
    pub kind: BoundaryKind,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// One layer of a feed-forward network. Tensors carry a leading batch axis;
/// the remaining axes are either flat features or `tokens × width`.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// `y = x Wᵀ + b` over the innermost axis (per token for sequences).
    Dense {
        fan_in: usize,
        fan_out: usize,
    },
    Activation(Activation),
    LayerNorm {
        width: usize,
    },
    /// Multi-head self-attention with a residual connection.
    SelfAttention {
        heads: usize,
        head_dim: usize,
    },
    /// Flat `tokens * width` features viewed as a token sequence.
    ToTokens {
        tokens: usize,
        width: usize,
    },
    /// Repeats one feature vector as `tokens` identical tokens.
    Broadcast {
        tokens: usize,
    },
    /// Adds a learned `tokens × width` table.
    PositionEmbedding {
        tokens: usize,
        width: usize,
    },
    /// Mean over tokens.
    MeanPool,
    Flatten,
    /// Parallel sub-networks whose flat outputs are concatenated. With
    /// `split`, branch `j` sees the `j`-th equal chunk of the input;
    /// otherwise every branch sees the whole input.
    Branches {
        split: bool,
        branches: Vec<Vec<LayerSpec>>,
    },
    Boundary(BoundaryLayer),
}

/// Non-batch extent of an activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signature {
    Flat(usize),
    Seq { tokens: usize, width: usize },
}

impl Signature {
    pub fn width(self) -> usize {
        match self {
            Signature::Flat(w) => w,
            Signature::Seq { width, .. } => width,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Signature::Flat(w) => w,
            Signature::Seq { tokens, width } => tokens * width,
        }
    }

    fn with_width(self, w: usize) -> Self {
        match self {
            Signature::Flat(_) => Signature::Flat(w),
            Signature::Seq { tokens, .. } => Signature::Seq { tokens, width: w },
        }
    }

    fn batch_shape(self, batch: usize) -> Vec<usize> {
        match self {
            Signature::Flat(w) => vec![batch, w],
            Signature::Seq { tokens, width } => vec![batch, tokens, width],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight { fan_in: usize, fan_out: usize },
    Bias,
    Gain,
    Shift,
    Embedding,
}

#[derive(Debug, Clone)]
pub struct ParamSlot {
    pub name: String,
    pub group: usize,
    pub role: ParamRole,
    pub shape: Vec<usize>,
}

/// Multiply-accumulate counts recorded during a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCount {
    pub total: u64,
    /// Score and mixing products of self-attention (the part quadratic in
    /// sequence length).
    pub attention: u64,
}

/// A validated layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    input: Signature,
    output: Signature,
    shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(input: Signature, layers: Vec<LayerSpec>) -> Result<Self> {
        if input.size() == 0 {
            return Err(Error::InvalidNetwork("empty input".into()));
        }
        let output = check_layers(&layers, input)?;
        let mut net = Self {
            layers,
            input,
            output,
            shapes: Vec::new(),
        };
        net.shapes = net.param_slots().into_iter().map(|s| s.shape).collect();
        Ok(net)
    }

    /// Convenience constructor for flat input features.
    pub fn flat(input_width: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        Self::new(Signature::Flat(input_width), layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input(&self) -> Signature {
        self.input
    }

    pub fn output(&self) -> Signature {
        self.output
    }

    pub fn param_slots(&self) -> Vec<ParamSlot> {
        let mut out = Vec::new();
        let mut group = 0;
        collect_slots(&self.layers, "", &mut group, &mut out);
        out
    }

    /// Names of the parameters of the final dense layer (one per branch when
    /// the network ends in branches). Zeroing them makes the network output
    /// zero before any boundary layer.
    pub fn output_param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        collect_output_names(&self.layers, "", &mut out);
        out
    }

    fn check_params(&self, params: &ParamSet) -> Result<()> {
        if self.shapes.len() != params.len() {
            return Err(Error::LengthMismatch {
                expected: self.shapes.len(),
                found: params.len(),
            });
        }
        for (shape, p) in self.shapes.iter().zip(params.params()) {
            if shape.as_slice() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    expected: shape.clone(),
                    found: p.value.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Runs the network and records everything needed for [`Network::backward`].
    pub fn forward(&self, params: &ParamSet, input: &Tensor) -> Result<(Tensor, Tape)> {
        self.check_params(params)?;
        let shape = input.shape();
        let expected = self.input.batch_shape(shape.first().copied().unwrap_or(0));
        if shape.len() != expected.len() || shape[1..] != expected[1..] || shape[0] == 0 {
            return Err(Error::ShapeMismatch {
                expected,
                found: shape.to_vec(),
            });
        }
        let mut ctx = Forward {
            params,
            cursor: 0,
            macs: MacCount::default(),
        };
        let (out, records) = forward_layers(&self.layers, input.clone(), &mut ctx)?;
        let tape = Tape {
            version: params.version(),
            batch: shape[0],
            records,
            macs: ctx.macs,
        };
        Ok((out, tape))
    }

    /// Forward pass without keeping a tape.
    pub fn predict(&self, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
        self.forward(params, input).map(|(y, _)| y)
    }

    /// Reverse pass: gradients of `<out_grad, output>` with respect to every
    /// parameter and to the input.
    pub fn backward(&self, params: &ParamSet, tape: &Tape, out_grad: &Tensor) -> Result<Gradients> {
        self.check_backward(params, tape, out_grad)?;
        let mut grads: Vec<Tensor> = params.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let input = backward_layers(&self.layers, &tape.records, out_grad.clone(), params, 0, &mut grads)?;
        Ok(Gradients { params: grads, input })
    }

    /// Gradient with respect to the input only; skips parameter gradients.
    pub fn input_gradient(&self, params: &ParamSet, tape: &Tape, out_grad: &Tensor) -> Result<Tensor> {
        self.check_backward(params, tape, out_grad)?;
        let mut none: Vec<Tensor> = (0..params.len()).map(|_| Tensor::zeros(&[0])).collect();
        backward_layers(&self.layers, &tape.records, out_grad.clone(), params, 0, &mut none)
    }

    fn check_backward(&self, params: &ParamSet, tape: &Tape, out_grad: &Tensor) -> Result<()> {
        if tape.version != params.version() {
            return Err(Error::StaleTape);
        }
        let expected = self.output.batch_shape(tape.batch);
        if out_grad.shape() != expected.as_slice() {
            return Err(Error::ShapeMismatch {
                expected,
                found: out_grad.shape().to_vec(),
            });
        }
        if !out_grad.is_finite() {
            return Err(Error::NonFinite("output gradient".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

/// Activations cached by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    batch: usize,
    records: Vec<Record>,
    macs: MacCount,
}

impl Tape {
    pub fn macs(&self) -> MacCount {
        self.macs
    }
}

#[derive(Debug, Clone)]
enum Record {
    Dense {
        input: Tensor,
    },
    Act {
        input: Tensor,
        output: Tensor,
    },
    Norm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention(Box<AttentionCache>),
    Reshape {
        from: Vec<usize>,
    },
    Broadcast {
        tokens: usize,
    },
    PosEmb,
    MeanPool {
        tokens: usize,
    },
    Branches {
        records: Vec<Vec<Record>>,
        widths: Vec<usize>,
        in_width: usize,
    },
    Boundary {
        input: Tensor,
    },
}

#[derive(Debug, Clone)]
struct AttentionCache {
    x: Tensor,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    context: Tensor,
}

fn check_layers(layers: &[LayerSpec], mut sig: Signature) -> Result<Signature> {
    for (i, layer) in layers.iter().enumerate() {
        let bad = |msg: String| Error::InvalidNetwork(format!("layer {i}: {msg}"));
        sig = match layer {
            LayerSpec::Dense { fan_in, fan_out } => {
                if *fan_in == 0 || *fan_out == 0 {
                    return Err(bad("dense extents must be positive".into()));
                }
                if sig.width() != *fan_in {
                    return Err(bad(format!("dense expects width {fan_in}, got {}", sig.width())));
                }
                sig.with_width(*fan_out)
            }
            LayerSpec::Activation(_) => sig,
            LayerSpec::LayerNorm { width } => {
                if sig.width() != *width || *width == 0 {
                    return Err(bad(format!("layer norm width {width} vs input {}", sig.width())));
                }
                sig
            }
            LayerSpec::SelfAttention { heads, head_dim } => match sig {
                Signature::Seq { width, .. } if *heads > 0 && *head_dim > 0 && heads * head_dim == width => sig,
                _ => return Err(bad(format!("attention {heads}×{head_dim} does not fit {sig:?}"))),
            },
            LayerSpec::ToTokens { tokens, width } => match sig {
                Signature::Flat(w) if w == tokens * width && *tokens > 0 => Signature::Seq {
                    tokens: *tokens,
                    width: *width,
                },
                _ => return Err(bad(format!("cannot view {sig:?} as {tokens}×{width} tokens"))),
            },
            LayerSpec::Broadcast { tokens } => match sig {
                Signature::Flat(w) if *tokens > 0 => Signature::Seq {
                    tokens: *tokens,
                    width: w,
                },
                _ => return Err(bad("broadcast needs flat input".into())),
            },
            LayerSpec::PositionEmbedding { tokens, width } => match sig {
                Signature::Seq { tokens: t, width: w } if t == *tokens && w == *width => sig,
                _ => return Err(bad(format!("position table {tokens}×{width} vs {sig:?}"))),
            },
            LayerSpec::MeanPool => match sig {
                Signature::Seq { width, .. } => Signature::Flat(width),
                _ => return Err(bad("mean pool needs tokens".into())),
            },
            LayerSpec::Flatten => Signature::Flat(sig.size()),
            LayerSpec::Branches { split, branches } => {
                let Signature::Flat(w) = sig else {
                    return Err(bad("branches need flat input".into()));
                };
                if branches.is_empty() {
                    return Err(bad("no branches".into()));
                }
                let m = branches.len();
                if *split && w % m != 0 {
                    return Err(bad(format!("{m} branches do not divide width {w}")));
                }
                let bin = if *split { w / m } else { w };
                let mut total = 0;
                for b in branches {
                    match check_layers(b, Signature::Flat(bin))? {
                        Signature::Flat(o) => total += o,
                        other => return Err(bad(format!("branch output {other:?} is not flat"))),
                    }
                }
                Signature::Flat(total)
            }
            LayerSpec::Boundary(b) => {
                let Signature::Flat(d) = sig else {
                    return Err(bad("boundary needs flat input".into()));
                };
                if b.lower.len() != d || b.upper.len() != d {
                    return Err(bad(format!("boundary has {} bounds for width {d}", b.lower.len())));
                }
                let ok = b
                    .lower
                    .iter()
                    .zip(&b.upper)
                    .all(|(lo, hi)| lo.is_finite() && hi.is_finite() && lo < hi);
                if !ok {
                    return Err(bad("bounds must be finite with lower < upper".into()));
                }
                sig
            }
        };
    }
    Ok(sig)
}

fn collect_slots(layers: &[LayerSpec], prefix: &str, group: &mut usize, out: &mut Vec<ParamSlot>) {
    for (i, layer) in layers.iter().enumerate() {
        let base = format!("{prefix}l{i}");
        let mut push = |suffix: &str, role: ParamRole, shape: Vec<usize>, g: usize| {
            out.push(ParamSlot {
                name: format!("{base}.{suffix}"),
                group: g,
                role,
                shape,
            })
        };
        match layer {
            LayerSpec::Dense { fan_in, fan_out } => {
                let g = *group;
                *group += 1;
                push(
                    "weight",
                    ParamRole::Weight {
                        fan_in: *fan_in,
                        fan_out: *fan_out,
                    },
                    vec![*fan_out, *fan_in],
                    g,
                );
                push("bias", ParamRole::Bias, vec![*fan_out], g);
            }
            LayerSpec::LayerNorm { width } => {
                let g = *group;
                *group += 1;
                push("gain", ParamRole::Gain, vec![*width], g);
                push("shift", ParamRole::Shift, vec![*width], g);
            }
            LayerSpec::SelfAttention { heads, head_dim } => {
                let g = *group;
                *group += 1;
                let e = heads * head_dim;
                for name in ["q", "k", "v", "o"] {
                    push(
                        &format!("{name}_weight"),
                        ParamRole::Weight { fan_in: e, fan_out: e },
                        vec![e, e],
                        g,
                    );
                    push(&format!("{name}_bias"), ParamRole::Bias, vec![e], g);
                }
            }
            LayerSpec::PositionEmbedding { tokens, width } => {
                let g = *group;
                *group += 1;
                push("table", ParamRole::Embedding, vec![*tokens, *width], g);
            }
            LayerSpec::Branches { branches, .. } => {
                for (j, b) in branches.iter().enumerate() {
                    collect_slots(b, &format!("{base}.b{j}."), group, out);
                }
            }
            _ => {}
        }
    }
}

fn collect_output_names(layers: &[LayerSpec], prefix: &str, out: &mut Vec<String>) {
    for (i, layer) in layers.iter().enumerate().rev() {
        match layer {
            LayerSpec::Dense { .. } => {
                out.push(format!("{prefix}l{i}.weight"));
                out.push(format!("{prefix}l{i}.bias"));
                return;
            }
            LayerSpec::Branches { branches, .. } => {
                for (j, b) in branches.iter().enumerate() {
                    collect_output_names(b, &format!("{prefix}l{i}.b{j}."), out);
                }
                return;
            }
            LayerSpec::LayerNorm { .. } | LayerSpec::SelfAttention { .. } | LayerSpec::PositionEmbedding { .. } => {
                return
            }
            _ => {}
        }
    }
}

fn param_count(layer: &LayerSpec) -> usize {
    match layer {
        LayerSpec::Dense { .. } | LayerSpec::LayerNorm { .. } => 2,
        LayerSpec::SelfAttention { .. } => 8,
        LayerSpec::PositionEmbedding { .. } => 1,
        LayerSpec::Branches { branches, .. } => branches.iter().flatten().map(param_count).sum(),
        _ => 0,
    }
}

struct Forward<'a> {
    params: &'a ParamSet,
    cursor: usize,
    macs: MacCount,
}

impl<'a> Forward<'a> {
    fn next(&mut self) -> &'a Tensor {
        let t = self.params.tensor(self.cursor);
        self.cursor += 1;
        t
    }
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("non-scalar") = last;
    s
}

fn dense_apply(x: &Tensor, w: &Tensor, b: &Tensor, fan_in: usize, fan_out: usize) -> Tensor {
    let rows = x.outer_len();
    let mut out = Tensor::zeros(&with_last(x.shape(), fan_out));
    {
        let y = out.data_mut();
        for r in 0..rows {
            y[r * fan_out..(r + 1) * fan_out].copy_from_slice(b.data());
        }
        gemm(
            rows,
            fan_in,
            fan_out,
            1.0,
            Mat::rows(x.data(), fan_in),
            Mat::transposed(w.data(), fan_in),
            1.0,
            y,
            0,
            fan_out,
            1,
        );
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient.
fn dense_grad(
    x: &Tensor,
    g: &Tensor,
    w: &Tensor,
    fan_in: usize,
    fan_out: usize,
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Tensor {
    let rows = x.outer_len();
    // Empty accumulators mark an input-only pass.
    if !dw.is_empty() {
        gemm(
            fan_out,
            rows,
            fan_in,
            1.0,
            Mat::transposed(g.data(), fan_out),
            Mat::rows(x.data(), fan_in),
            1.0,
            dw.data_mut(),
            0,
            fan_in,
            1,
        );
        let dbd = db.data_mut();
        for row in g.data().chunks_exact(fan_out) {
            for (acc, v) in dbd.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    gemm(
        rows,
        fan_out,
        fan_in,
        1.0,
        Mat::rows(g.data(), fan_out),
        Mat::rows(w.data(), fan_in),
        0.0,
        dx.data_mut(),
        0,
        fan_in,
        1,
    );
    dx
}

fn forward_layers(layers: &[LayerSpec], mut x: Tensor, ctx: &mut Forward<'_>) -> Result<(Tensor, Vec<Record>)> {
    let mut records = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let (y, rec) = forward_one(layer, x, ctx)?;
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("activation of layer {i}")));
        }
        records.push(rec);
        x = y;
    }
    Ok((x, records))
}

fn forward_one(layer: &LayerSpec, x: Tensor, ctx: &mut Forward<'_>) -> Result<(Tensor, Record)> {
    Ok(match layer {
        LayerSpec::Dense { fan_in, fan_out } => {
            let w = ctx.next();
            let b = ctx.next();
            ctx.macs.total += (x.outer_len() * fan_in * fan_out) as u64;
            let y = dense_apply(&x, w, b, *fan_in, *fan_out);
            (y, Record::Dense { input: x })
        }
        LayerSpec::Activation(act) => {
            let y = x.map(|v| act.apply(v));
            (y.clone(), Record::Act { input: x, output: y })
        }
        LayerSpec::LayerNorm { width } => {
            let gain = ctx.next();
            let shift = ctx.next();
            let rows = x.outer_len();
            let mut y = Tensor::zeros(x.shape());
            let mut xhat = vec![0.0; x.len()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let row = &x.data()[r * width..(r + 1) * width];
                let mean = row.iter().sum::<f64>() / *width as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / *width as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[r] = is;
                for c in 0..*width {
                    let h = (row[c] - mean) * is;
                    xhat[r * width + c] = h;
                    y.data_mut()[r * width + c] = gain.data()[c] * h + shift.data()[c];
                }
            }
            (y, Record::Norm { xhat, inv_std })
        }
        LayerSpec::SelfAttention { heads, head_dim } => {
            let p: [&Tensor; 8] = std::array::from_fn(|_| ctx.next());
            attention_forward(x, &p, *heads, *head_dim, &mut ctx.macs)
        }
        LayerSpec::ToTokens { tokens, width } => {
            let from = x.shape().to_vec();
            let y = x.reshape(vec![from[0], *tokens, *width])?;
            (y, Record::Reshape { from })
        }
        LayerSpec::Flatten => {
            let from = x.shape().to_vec();
            let y = x.reshape(vec![from[0], from[1..].iter().product()])?;
            (y, Record::Reshape { from })
        }
        LayerSpec::Broadcast { tokens } => {
            let (b, w) = (x.shape()[0], x.shape()[1]);
            let mut data = Vec::with_capacity(b * tokens * w);
            for row in x.data().chunks_exact(w) {
                for _ in 0..*tokens {
                    data.extend_from_slice(row);
                }
            }
            (
                Tensor::new(vec![b, *tokens, w], data)?,
                Record::Broadcast { tokens: *tokens },
            )
        }
        LayerSpec::PositionEmbedding { .. } => {
            let table = ctx.next();
            let mut y = x;
            for chunk in y.data_mut().chunks_exact_mut(table.len()) {
                for (v, t) in chunk.iter_mut().zip(table.data()) {
                    *v += t;
                }
            }
            (y, Record::PosEmb)
        }
        LayerSpec::MeanPool => {
            let (b, s, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut y = Tensor::zeros(&[b, w]);
            for bi in 0..b {
                let out = &mut y.data_mut()[bi * w..(bi + 1) * w];
                for t in 0..s {
                    let row = &x.data()[(bi * s + t) * w..(bi * s + t + 1) * w];
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v / s as f64;
                    }
                }
            }
            (y, Record::MeanPool { tokens: s })
        }
        LayerSpec::Branches { split, branches } => {
            let (b, w) = (x.shape()[0], x.shape()[1]);
            let m = branches.len();
            let bin = if *split { w / m } else { w };
            let mut outs = Vec::with_capacity(m);
            let mut records = Vec::with_capacity(m);
            for (j, branch) in branches.iter().enumerate() {
                let input = if *split {
                    let mut data = Vec::with_capacity(b * bin);
                    for row in x.data().chunks_exact(w) {
                        data.extend_from_slice(&row[j * bin..(j + 1) * bin]);
                    }
                    Tensor::new(vec![b, bin], data)?
                } else {
                    x.clone()
                };
                let (y, rec) = forward_layers(branch, input, ctx)?;
                outs.push(y);
                records.push(rec);
            }
            let widths: Vec<usize> = outs.iter().map(|t| t.shape()[1]).collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(b * total);
            for r in 0..b {
                for (t, &wj) in outs.iter().zip(&widths) {
                    data.extend_from_slice(&t.data()[r * wj..(r + 1) * wj]);
                }
            }
            (
                Tensor::new(vec![b, total], data)?,
                Record::Branches {
                    records,
                    widths,
                    in_width: w,
                },
            )
        }
        LayerSpec::Boundary(bl) => {
            let d = bl.lower.len();
            let mut y = x.clone();
            for row in y.data_mut().chunks_exact_mut(d) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = bl.kind.map(*v, bl.lower[j], bl.upper[j]);
                }
            }
            (y, Record::Boundary { input: x })
        }
    })
}

fn attention_forward(
    x: Tensor,
    p: &[&Tensor; 8],
    heads: usize,
    head_dim: usize,
    macs: &mut MacCount,
) -> (Tensor, Record) {
    let (b, s, e) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let q = dense_apply(&x, p[0], p[1], e, e).into_data();
    let k = dense_apply(&x, p[2], p[3], e, e).into_data();
    let v = dense_apply(&x, p[4], p[5], e, e).into_data();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut probs = vec![0.0; b * heads * s * s];
    let mut context = Tensor::zeros(&[b, s, e]);
    for bi in 0..b {
        for h in 0..heads {
            let off = bi * s * e + h * head_dim;
            let poff = (bi * heads + h) * s * s;
            gemm(
                s,
                head_dim,
                s,
                scale,
                Mat::new(&q, off, e, 1),
                Mat::new(&k, off, 1, e),
                0.0,
                &mut probs,
                poff,
                s,
                1,
            );
            for row in probs[poff..poff + s * s].chunks_exact_mut(s) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            gemm(
                s,
                s,
                head_dim,
                1.0,
                Mat::new(&probs, poff, s, 1),
                Mat::new(&v, off, e, 1),
                0.0,
                context.data_mut(),
                off,
                e,
                1,
            );
        }
    }
    let mut y = dense_apply(&context, p[6], p[7], e, e);
    y.add_assign(&x);
    let rows = (b * s) as u64;
    macs.total += 4 * rows * (e * e) as u64;
    let quad = 2 * (b * heads * s * s * head_dim) as u64;
    macs.total += quad;
    macs.attention += quad;
    let cache = AttentionCache {
        x,
        q,
        k,
        v,
        probs,
        context,
    };
    (y, Record::Attention(Box::new(cache)))
}

fn backward_layers(
    layers: &[LayerSpec],
    records: &[Record],
    mut g: Tensor,
    params: &ParamSet,
    base: usize,
    grads: &mut [Tensor],
) -> Result<Tensor> {
    let mut offsets = Vec::with_capacity(layers.len());
    let mut acc = base;
    for l in layers {
        offsets.push(acc);
        acc += param_count(l);
    }
    for ((layer, rec), &off) in layers.iter().zip(records).zip(&offsets).rev() {
        g = backward_one(layer, rec, g, params, off, grads)?;
    }
    Ok(g)
}

fn two_mut(grads: &mut [Tensor], i: usize) -> (&mut Tensor, &mut Tensor) {
    let (a, b) = grads[i..].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

fn backward_one(
    layer: &LayerSpec,
    rec: &Record,
    g: Tensor,
    params: &ParamSet,
    off: usize,
    grads: &mut [Tensor],
) -> Result<Tensor> {
    Ok(match (layer, rec) {
        (LayerSpec::Dense { fan_in, fan_out }, Record::Dense { input }) => {
            let (dw, db) = two_mut(grads, off);
            dense_grad(input, &g, params.tensor(off), *fan_in, *fan_out, dw, db)
        }
        (LayerSpec::Activation(act), Record::Act { input, output }) => {
            let mut dx = g;
            for ((d, &x), &y) in dx.data_mut().iter_mut().zip(input.data()).zip(output.data()) {
                *d *= act.derivative(x, y);
            }
            dx
        }
        (LayerSpec::LayerNorm { width }, Record::Norm { xhat, inv_std }) => {
            let gain = params.tensor(off).data().to_vec();
            let (dgain, dshift) = two_mut(grads, off);
            let mut dx = Tensor::zeros(g.shape());
            let w = *width as f64;
            for (r, &is) in inv_std.iter().enumerate() {
                let gr = &g.data()[r * width..(r + 1) * width];
                let hr = &xhat[r * width..(r + 1) * width];
                let mut sum_d = 0.0;
                let mut sum_dh = 0.0;
                if !dgain.is_empty() {
                    for c in 0..*width {
                        dgain.data_mut()[c] += gr[c] * hr[c];
                        dshift.data_mut()[c] += gr[c];
                    }
                }
                for c in 0..*width {
                    let dh = gr[c] * gain[c];
                    sum_d += dh;
                    sum_dh += dh * hr[c];
                }
                let out = &mut dx.data_mut()[r * width..(r + 1) * width];
                for c in 0..*width {
                    let dh = gr[c] * gain[c];
                    out[c] = is / w * (w * dh - sum_d - hr[c] * sum_dh);
                }
            }
            dx
        }
        (LayerSpec::SelfAttention { heads, head_dim }, Record::Attention(cache)) => {
            attention_backward(cache, g, params, off, *heads, *head_dim, grads)
        }
        (LayerSpec::ToTokens { .. } | LayerSpec::Flatten, Record::Reshape { from }) => g.reshape(from.clone())?,
        (LayerSpec::Broadcast { .. }, Record::Broadcast { tokens }) => {
            let (b, w) = (g.shape()[0], g.shape()[2]);
            let mut dx = Tensor::zeros(&[b, w]);
            for bi in 0..b {
                let out = &mut dx.data_mut()[bi * w..(bi + 1) * w];
                for t in 0..*tokens {
                    let row = &g.data()[(bi * tokens + t) * w..(bi * tokens + t + 1) * w];
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            dx
        }
        (LayerSpec::PositionEmbedding { .. }, Record::PosEmb) => {
            let dt = &mut grads[off];
            let n = dt.len().max(1);
            let skip = dt.is_empty();
            for chunk in g.data().chunks_exact(n).filter(|_| !skip) {
                for (a, v) in dt.data_mut().iter_mut().zip(chunk) {
                    *a += v;
                }
            }
            g
        }
        (LayerSpec::MeanPool, Record::MeanPool { tokens }) => {
            let (b, w) = (g.shape()[0], g.shape()[1]);
            let mut data = Vec::with_capacity(b * tokens * w);
            for row in g.data().chunks_exact(w) {
                for _ in 0..*tokens {
                    data.extend(row.iter().map(|v| v / *tokens as f64));
                }
            }
            Tensor::new(vec![b, *tokens, w], data)?
        }
        (
            LayerSpec::Branches { split, branches },
            Record::Branches {
                records,
                widths,
                in_width,
            },
        ) => {
            let b = g.shape()[0];
            let total: usize = widths.iter().sum();
            let m = branches.len();
            let bin = if *split { in_width / m } else { *in_width };
            let mut dx = Tensor::zeros(&[b, *in_width]);
            let mut col = 0;
            let mut poff = off;
            for (j, ((branch, recs), &wj)) in branches.iter().zip(records).zip(widths).enumerate() {
                let mut gj = Vec::with_capacity(b * wj);
                for row in g.data().chunks_exact(total) {
                    gj.extend_from_slice(&row[col..col + wj]);
                }
                col += wj;
                let gj = Tensor::new(vec![b, wj], gj)?;
                let dxj = backward_layers(branch, recs, gj, params, poff, grads)?;
                poff += branch.iter().map(param_count).sum::<usize>();
                for (r, row) in dxj.data().chunks_exact(bin).enumerate() {
                    let start = if *split { j * bin } else { 0 };
                    let out = &mut dx.data_mut()[r * in_width + start..r * in_width + start + bin];
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            dx
        }
        (LayerSpec::Boundary(bl), Record::Boundary { input }) => {
            let d = bl.lower.len();
            let mut dx = g;
            for (row, yrow) in dx.data_mut().chunks_exact_mut(d).zip(input.data().chunks_exact(d)) {
                for j in 0..d {
                    row[j] *= bl.kind.map_derivative(yrow[j], bl.lower[j], bl.upper[j]);
                }
            }
            dx
        }
        _ => return Err(Error::InvalidNetwork("tape does not match network".into())),
    })
}

fn attention_backward(
    c: &AttentionCache,
    g: Tensor,
    params: &ParamSet,
    off: usize,
    heads: usize,
    head_dim: usize,
    grads: &mut [Tensor],
) -> Tensor {
    let (b, s, e) = (c.x.shape()[0], c.x.shape()[1], c.x.shape()[2]);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut dx = g.clone();
    let dctx = {
        let (dw, db) = two_mut(grads, off + 6);
        dense_grad(&c.context, &g, params.tensor(off + 6), e, e, dw, db)
    };
    let mut dq = vec![0.0; b * s * e];
    let mut dk = vec![0.0; b * s * e];
    let mut dv = vec![0.0; b * s * e];
    let mut dp = vec![0.0; s * s];
    for bi in 0..b {
        for h in 0..heads {
            let xo = bi * s * e + h * head_dim;
            let po = (bi * heads + h) * s * s;
            let p = &c.probs[po..po + s * s];
            // dP = dCtx_h V_hᵀ
            gemm(
                s,
                head_dim,
                s,
                1.0,
                Mat::new(dctx.data(), xo, e, 1),
                Mat::new(&c.v, xo, 1, e),
                0.0,
                &mut dp,
                0,
                s,
                1,
            );
            // dV_h = Pᵀ dCtx_h
            gemm(
                s,
                s,
                head_dim,
                1.0,
                Mat::new(&c.probs, po, 1, s),
                Mat::new(dctx.data(), xo, e, 1),
                0.0,
                &mut dv,
                xo,
                e,
                1,
            );
            // softmax backward, folded with the score scale
            for (drow, prow) in dp.chunks_exact_mut(s).zip(p.chunks_exact(s)) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (dv, &pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot) * scale;
                }
            }
            gemm(
                s,
                s,
                head_dim,
                1.0,
                Mat::rows(&dp, s),
                Mat::new(&c.k, xo, e, 1),
                0.0,
                &mut dq,
                xo,
                e,
                1,
            );
            gemm(
                s,
                s,
                head_dim,
                1.0,
                Mat::transposed(&dp, s),
                Mat::new(&c.q, xo, e, 1),
                0.0,
                &mut dk,
                xo,
                e,
                1,
            );
        }
    }
    let shape = [b, s, e];
    for (i, d) in [dq, dk, dv].into_iter().enumerate() {
        let d = Tensor::new(shape.to_vec(), d).expect("attention grad shape");
        let (dw, db) = two_mut(grads, off + 2 * i);
        let part = dense_grad(&c.x, &d, params.tensor(off + 2 * i), e, e, dw, db);
        dx.add_assign(&part);
    }
    dx
}
