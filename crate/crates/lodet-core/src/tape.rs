//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Operations append nodes in topological order, so the backward sweep is a
//! single reverse pass that visits each node exactly once. Values are owned
//! by the tape; [`Var`] is a cheap index handle. The op set covers exactly
//! what the detector blocks need.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::conv::{conv2d, conv2d_backward, Conv2dCfg, ConvPath};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation counts observed while executing one op.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCost {
    pub macs: u64,
    pub bias_adds: u64,
    /// Element moves performed by channel shuffles (no arithmetic).
    pub shuffle_moves: u64,
}

impl OpCost {
    pub fn flops(&self) -> u64 {
        2 * self.macs + 2 * self.bias_adds
    }
}

/// Backward rule for an externally defined operation.
pub trait CustomGrad<S: Scalar> {
    /// Accumulate gradients for each input given the output gradient.
    /// `input_values[i]` and `input_grads[i]` correspond to the op's i-th input.
    fn backward(
        &self,
        input_values: &[&Tensor<S>],
        out_grad: &Tensor<S>,
        input_grads: &mut [Tensor<S>],
    );
}

enum Op<S: Scalar> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, cfg: Conv2dCfg },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// scale * x + shift, elementwise.
    Affine { x: Var, scale: f64 },
    Relu6 { x: Var },
    Sigmoid { x: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    ConcatChannels { xs: Vec<Var> },
    SliceChannels { x: Var, from: usize, to: usize },
    ChannelShuffle { x: Var, groups: usize },
    GlobalAvgPool { x: Var },
    AvgPool2 { x: Var },
    UpsampleNearest2 { x: Var },
    Linear { x: Var, w: Var, b: Var },
    SoftmaxRows { x: Var },
    MixKernels { routing: Var, experts: Var },
    ScaleByElement { x: Var, s: Var, index: usize },
    ChannelNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Sum { x: Var },
    DotConst { x: Var, weights: Vec<f64> },
    Custom { inputs: Vec<Var>, grad: Box<dyn CustomGrad<S>> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

/// Recording tape. Single-threaded by construction.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    costs: Vec<OpCost>,
    conv_path: ConvPath,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), costs: Vec::new(), conv_path: ConvPath::Im2col, consumed: false }
    }

    pub fn with_conv_path(path: ConvPath) -> Self {
        Self { conv_path: path, ..Self::new() }
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cost recorded for the node that produced `var`.
    pub fn cost(&self, var: Var) -> OpCost {
        self.costs[var.0]
    }

    fn requires(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool, cost: OpCost) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.costs.push(cost);
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        value: Tensor<S>,
        op: Op<S>,
        requires_grad: bool,
        cost: OpCost,
        context: &str,
    ) -> Result<Var> {
        value.check_finite(context)?;
        Ok(self.push(value, op, requires_grad, cost))
    }

    /// Register an input tensor. Gradients flow back to it when requested.
    pub fn input(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, OpCost::default())
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.input(value, false)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        cfg: Conv2dCfg,
    ) -> Result<Var> {
        let (value, cost) = conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &cfg,
            self.conv_path,
        )?;
        let requires =
            self.requires(x) || self.requires(w) || b.is_some_and(|b| self.requires(b));
        self.push_checked(
            value,
            Op::Conv2d { x, w, b, cfg },
            requires,
            OpCost { macs: cost.macs, bias_adds: cost.bias_adds, shuffle_moves: 0 },
            "conv2d",
        )
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, which: &'static str) -> Result<Tensor<S>> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(TensorError::ShapeMismatch {
                context: format!("{which}: {:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data = match which {
            "add" => va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect(),
            "sub" => va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect(),
            _ => va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect(),
        };
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_same_shape(a, b, "add")?;
        let req = self.requires(a) || self.requires(b);
        self.push_checked(value, Op::Add { a, b }, req, OpCost::default(), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_same_shape(a, b, "sub")?;
        let req = self.requires(a) || self.requires(b);
        self.push_checked(value, Op::Sub { a, b }, req, OpCost::default(), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_same_shape(a, b, "mul")?;
        let req = self.requires(a) || self.requires(b);
        self.push_checked(value, Op::Mul { a, b }, req, OpCost::default(), "mul")
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, t) = (S::from_f64(scale), S::from_f64(shift));
        let value = self.value(x).map(|v| s * v + t);
        let req = self.requires(x);
        self.push_checked(value, Op::Affine { x, scale }, req, OpCost::default(), "affine")
    }

    pub fn relu6(&mut self, x: Var) -> Result<Var> {
        let six = S::from_f64(6.0);
        let value = self.value(x).map(|v| v.max(S::zero()).min(six));
        let req = self.requires(x);
        self.push_checked(value, Op::Relu6 { x }, req, OpCost::default(), "relu6")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid_scalar);
        let req = self.requires(x);
        self.push_checked(value, Op::Sigmoid { x }, req, OpCost::default(), "sigmoid")
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (l, h) = (S::from_f64(lo), S::from_f64(hi));
        let value = self.value(x).map(|v| v.max(l).min(h));
        let req = self.requires(x);
        self.push_checked(value, Op::Clamp { x, lo, hi }, req, OpCost::default(), "clamp")
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::BadParameter { context: String::from("concat of nothing") });
        }
        let (n, _, h, w) = self.value(xs[0]).dims4()?;
        let mut total_c = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(TensorError::ShapeMismatch {
                    context: format!(
                        "concat operand {:?} incompatible with (n={n},h={h},w={w})",
                        self.value(v).shape()
                    ),
                });
            }
            total_c += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for bn in 0..n {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                let base = bn * c * hw;
                out.extend_from_slice(&t.data()[base..base + c * hw]);
            }
        }
        let value = Tensor::new(&[n, total_c, h, w], out)?;
        let req = xs.iter().any(|&v| self.requires(v));
        self.push_checked(
            value,
            Op::ConcatChannels { xs: xs.to_vec() },
            req,
            OpCost::default(),
            "concat",
        )
    }

    /// Channels `from..to` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if from >= to || to > c {
            return Err(TensorError::ShapeMismatch {
                context: format!("slice {from}..{to} out of {c} channels"),
            });
        }
        let hw = h * w;
        let nc = to - from;
        let mut out = Vec::with_capacity(n * nc * hw);
        for bn in 0..n {
            let base = (bn * c + from) * hw;
            out.extend_from_slice(&self.value(x).data()[base..base + nc * hw]);
        }
        let value = Tensor::new(&[n, nc, h, w], out)?;
        let req = self.requires(x);
        self.push_checked(value, Op::SliceChannels { x, from, to }, req, OpCost::default(), "slice")
    }

    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::BadGroups { channels: c, groups });
        }
        let value = shuffle_channels(self.value(x), n, c, h, w, groups);
        let req = self.requires(x);
        let cost = OpCost { shuffle_moves: (n * c * h * w) as u64, ..OpCost::default() };
        self.push_checked(value, Op::ChannelShuffle { x, groups }, req, cost, "shuffle")
    }

    /// (N, C, H, W) -> (N, C) channel means.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = S::from_f64(1.0 / hw as f64);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        for nc in 0..n * c {
            let mut acc = S::zero();
            for &v in &xd[nc * hw..(nc + 1) * hw] {
                acc += v;
            }
            out.push(acc * inv);
        }
        let value = Tensor::new(&[n, c], out)?;
        let req = self.requires(x);
        self.push_checked(value, Op::GlobalAvgPool { x }, req, OpCost::default(), "gap")
    }

    /// 2x2 average pooling with stride 2. Spatial extents must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::ShapeMismatch {
                context: format!("avg_pool2 requires even extents, got {h}x{w}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = S::from_f64(0.25);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let p = base + (2 * oy) * w + 2 * ox;
                    out.push((xd[p] + xd[p + 1] + xd[p + w] + xd[p + w + 1]) * quarter);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let req = self.requires(x);
        self.push_checked(value, Op::AvgPool2 { x }, req, OpCost::default(), "avg_pool2")
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    out.push(xd[base + (oy / 2) * w + ox / 2]);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let req = self.requires(x);
        self.push_checked(value, Op::UpsampleNearest2 { x }, req, OpCost::default(), "upsample")
    }

    /// Fully connected layer: x (N, C) * w (K, C) + b (K) -> (N, K).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                context: format!("linear x{xs:?} w{ws:?} b{bs:?}"),
            });
        }
        let (n, c, k) = (xs[0], xs[1], ws[0]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(n * k);
        let mut cost = OpCost::default();
        for bn in 0..n {
            for ko in 0..k {
                let mut acc = S::zero();
                for ci in 0..c {
                    acc += xd[bn * c + ci] * wd[ko * c + ci];
                    cost.macs += 1;
                }
                acc += bd[ko];
                cost.bias_adds += 1;
                out.push(acc);
            }
        }
        let value = Tensor::new(&[n, k], out)?;
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        self.push_checked(value, Op::Linear { x, w, b }, req, cost, "linear")
    }

    /// Row-wise softmax of an (N, K) tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                context: format!("softmax_rows expects rank 2, got {xs:?}"),
            });
        }
        let (n, k) = (xs[0], xs[1]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * k);
        for bn in 0..n {
            let row = &xd[bn * k..(bn + 1) * k];
            let max = row.iter().copied().fold(S::neg_infinity(), |a, b| a.max(b));
            let exps: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
            let mut total = S::zero();
            for &e in &exps {
                total += e;
            }
            out.extend(exps.iter().map(|&e| e / total));
        }
        let value = Tensor::new(&[n, k], out)?;
        let req = self.requires(x);
        self.push_checked(value, Op::SoftmaxRows { x }, req, OpCost::default(), "softmax")
    }

    /// Weighted sum of expert kernels: routing (1, K) x experts (K, d...) -> (d...).
    pub fn mix_kernels(&mut self, routing: Var, experts: Var) -> Result<Var> {
        let rs = self.value(routing).shape().to_vec();
        let es = self.value(experts).shape().to_vec();
        if rs.len() != 2 || rs[0] != 1 || es.is_empty() || es[0] != rs[1] {
            return Err(TensorError::ShapeMismatch {
                context: format!("mix_kernels routing{rs:?} experts{es:?}"),
            });
        }
        let k = rs[1];
        let m: usize = es[1..].iter().product();
        let rd = self.value(routing).data();
        let ed = self.value(experts).data();
        let mut out = vec![S::zero(); m];
        for ke in 0..k {
            let r = rd[ke];
            for (o, &e) in out.iter_mut().zip(&ed[ke * m..(ke + 1) * m]) {
                *o += r * e;
            }
        }
        let value = Tensor::new(&es[1..], out)?;
        let req = self.requires(routing) || self.requires(experts);
        let cost = OpCost { macs: (k * m) as u64, ..OpCost::default() };
        self.push_checked(value, Op::MixKernels { routing, experts }, req, cost, "mix_kernels")
    }

    /// Multiply a tensor by one element of a flat routing vector.
    pub fn scale_by_element(&mut self, x: Var, s: Var, index: usize) -> Result<Var> {
        if index >= self.value(s).len() {
            return Err(TensorError::ShapeMismatch {
                context: format!("scale index {index} out of {}", self.value(s).len()),
            });
        }
        let sv = self.value(s).data()[index];
        let value = self.value(x).map(|v| v * sv);
        let req = self.requires(x) || self.requires(s);
        self.push_checked(value, Op::ScaleByElement { x, s, index }, req, OpCost::default(), "scale_by_element")
    }

    /// Per-channel standardization over the spatial extent with learnable
    /// gain/bias. Off by default in the detector blocks.
    pub fn channel_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gain).shape() != [c] || self.value(bias).shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                context: format!("channel_norm gain/bias must be ({c})"),
            });
        }
        let hw = h * w;
        let inv = S::from_f64(1.0 / hw as f64);
        let epsv = S::from_f64(eps);
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let mut out = Vec::with_capacity(xd.len());
        for bn in 0..n {
            for ci in 0..c {
                let base = (bn * c + ci) * hw;
                let slice = &xd[base..base + hw];
                let mut mean = S::zero();
                for &v in slice {
                    mean += v;
                }
                mean = mean * inv;
                let mut var = S::zero();
                for &v in slice {
                    var += (v - mean) * (v - mean);
                }
                var = var * inv;
                let scale = gd[ci] / (var + epsv).sqrt();
                for &v in slice {
                    out.push((v - mean) * scale + bd[ci]);
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push_checked(value, Op::ChannelNorm { x, gain, bias, eps }, req, OpCost::default(), "channel_norm")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let req = self.requires(x);
        self.push_checked(value, Op::Sum { x }, req, OpCost::default(), "sum")
    }

    /// Dot product with a constant weight vector; yields a scalar.
    pub fn dot_const(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let v = self.value(x);
        if v.len() != weights.len() {
            return Err(TensorError::ShapeMismatch {
                context: format!("dot_const: {} elements vs {} weights", v.len(), weights.len()),
            });
        }
        let mut acc = S::zero();
        for (&a, &w) in v.data().iter().zip(weights) {
            acc += a * S::from_f64(w);
        }
        let value = Tensor::scalar(acc);
        let req = self.requires(x);
        self.push_checked(
            value,
            Op::DotConst { x, weights: weights.to_vec() },
            req,
            OpCost::default(),
            "dot_const",
        )
    }

    /// Push an externally computed value with a custom backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<S>,
        grad: Box<dyn CustomGrad<S>>,
    ) -> Result<Var> {
        let req = inputs.iter().any(|&v| self.requires(v));
        self.push_checked(
            value,
            Op::Custom { inputs: inputs.to_vec(), grad },
            req,
            OpCost::default(),
            "custom",
        )
    }

    /// Reverse sweep from a scalar loss. Consumes the tape's ability to run
    /// backward again; values remain readable.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        self.consumed = true;
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NotScalar { len: loss_value.len() });
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let keep = matches!(self.nodes[id].op, Op::Leaf);
            self.accumulate_parents(id, &g, &mut grads)?;
            if keep {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate_parents(
        &self,
        id: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let add_to = |grads: &mut [Option<Tensor<S>>], var: Var, delta: Tensor<S>| -> Result<()> {
            match &mut grads[var.0] {
                Some(acc) => acc.add_assign(&delta),
                slot => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, cfg } => {
                let (dx, dw, db) =
                    conv2d_backward(self.value(*x), self.value(*w), b.is_some(), cfg, g)?;
                if self.requires(*x) {
                    add_to(grads, *x, dx)?;
                }
                if self.requires(*w) {
                    add_to(grads, *w, dw)?;
                }
                if let (Some(bv), Some(db)) = (b, db) {
                    if self.requires(*bv) {
                        add_to(grads, *bv, db)?;
                    }
                }
            }
            Op::Add { a, b } => {
                if self.requires(*a) {
                    add_to(grads, *a, g.clone())?;
                }
                if self.requires(*b) {
                    add_to(grads, *b, g.clone())?;
                }
            }
            Op::Sub { a, b } => {
                if self.requires(*a) {
                    add_to(grads, *a, g.clone())?;
                }
                if self.requires(*b) {
                    add_to(grads, *b, g.map(|v| -v))?;
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let vb = self.value(*b);
                    let d = Tensor::new(
                        g.shape(),
                        g.data().iter().zip(vb.data()).map(|(&gv, &bv)| gv * bv).collect(),
                    )?;
                    add_to(grads, *a, d)?;
                }
                if self.requires(*b) {
                    let va = self.value(*a);
                    let d = Tensor::new(
                        g.shape(),
                        g.data().iter().zip(va.data()).map(|(&gv, &av)| gv * av).collect(),
                    )?;
                    add_to(grads, *b, d)?;
                }
            }
            Op::Affine { x, scale } => {
                let s = S::from_f64(*scale);
                add_to(grads, *x, g.map(|v| s * v))?;
            }
            Op::Relu6 { x } => {
                let xv = self.value(*x);
                let six = S::from_f64(6.0);
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &x)| if x > S::zero() && x < six { gv } else { S::zero() })
                        .collect(),
                )?;
                add_to(grads, *x, d)?;
            }
            Op::Sigmoid { x } => {
                let yv = &self.nodes[id].value;
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(yv.data())
                        .map(|(&gv, &y)| gv * y * (S::one() - y))
                        .collect(),
                )?;
                add_to(grads, *x, d)?;
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let (l, h) = (S::from_f64(*lo), S::from_f64(*hi));
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &x)| if x > l && x < h { gv } else { S::zero() })
                        .collect(),
                )?;
                add_to(grads, *x, d)?;
            }
            Op::ConcatChannels { xs } => {
                let (n, c, h, w) = self.nodes[id].value.dims4()?;
                let hw = h * w;
                let gd = g.data();
                let mut offset = 0;
                for &xv in xs {
                    let ci = self.value(xv).shape()[1];
                    if self.requires(xv) {
                        let mut part = Vec::with_capacity(n * ci * hw);
                        for bn in 0..n {
                            let base = (bn * c + offset) * hw;
                            part.extend_from_slice(&gd[base..base + ci * hw]);
                        }
                        add_to(grads, xv, Tensor::new(&[n, ci, h, w], part)?)?;
                    }
                    offset += ci;
                }
            }
            Op::SliceChannels { x, from, to } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let nc = to - from;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for bn in 0..n {
                    let dst = (bn * c + from) * hw;
                    let src = bn * nc * hw;
                    dx.data_mut()[dst..dst + nc * hw]
                        .copy_from_slice(&g.data()[src..src + nc * hw]);
                }
                add_to(grads, *x, dx)?;
            }
            Op::ChannelShuffle { x, groups } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                // The inverse of a g-group shuffle is a (C/g)-group shuffle.
                let d = shuffle_channels(g, n, c, h, w, c / groups);
                add_to(grads, *x, d)?;
            }
            Op::GlobalAvgPool { x } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let inv = S::from_f64(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(n * c * hw);
                for nc in 0..n * c {
                    let gv = g.data()[nc] * inv;
                    dx.extend(core::iter::repeat(gv).take(hw));
                }
                add_to(grads, *x, Tensor::new(&[n, c, h, w], dx)?)?;
            }
            Op::AvgPool2 { x } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (oh, ow) = (h / 2, w / 2);
                let quarter = S::from_f64(0.25);
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let dxd = dx.data_mut();
                for nc in 0..n * c {
                    let obase = nc * oh * ow;
                    let ibase = nc * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.data()[obase + oy * ow + ox] * quarter;
                            let p = ibase + (2 * oy) * w + 2 * ox;
                            dxd[p] += gv;
                            dxd[p + 1] += gv;
                            dxd[p + w] += gv;
                            dxd[p + w + 1] += gv;
                        }
                    }
                }
                add_to(grads, *x, dx)?;
            }
            Op::UpsampleNearest2 { x } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let ow = 2 * w;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let dxd = dx.data_mut();
                for nc in 0..n * c {
                    let obase = nc * 4 * h * w;
                    let ibase = nc * h * w;
                    for oy in 0..2 * h {
                        for ox in 0..ow {
                            dxd[ibase + (oy / 2) * w + ox / 2] += g.data()[obase + oy * ow + ox];
                        }
                    }
                }
                add_to(grads, *x, dx)?;
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let k = wv.shape()[0];
                if self.requires(*x) {
                    let mut dx = vec![S::zero(); n * c];
                    for bn in 0..n {
                        for ko in 0..k {
                            let gv = g.data()[bn * k + ko];
                            for ci in 0..c {
                                dx[bn * c + ci] += gv * wv.data()[ko * c + ci];
                            }
                        }
                    }
                    add_to(grads, *x, Tensor::new(&[n, c], dx)?)?;
                }
                if self.requires(*w) {
                    let mut dw = vec![S::zero(); k * c];
                    for bn in 0..n {
                        for ko in 0..k {
                            let gv = g.data()[bn * k + ko];
                            for ci in 0..c {
                                dw[ko * c + ci] += gv * xv.data()[bn * c + ci];
                            }
                        }
                    }
                    add_to(grads, *w, Tensor::new(&[k, c], dw)?)?;
                }
                if self.requires(*b) {
                    let mut db = vec![S::zero(); k];
                    for bn in 0..n {
                        for ko in 0..k {
                            db[ko] += g.data()[bn * k + ko];
                        }
                    }
                    add_to(grads, *b, Tensor::new(&[k], db)?)?;
                }
            }
            Op::SoftmaxRows { x } => {
                let yv = &self.nodes[id].value;
                let (n, k) = (yv.shape()[0], yv.shape()[1]);
                let mut dx = Vec::with_capacity(n * k);
                for bn in 0..n {
                    let yrow = &yv.data()[bn * k..(bn + 1) * k];
                    let grow = &g.data()[bn * k..(bn + 1) * k];
                    let mut dot = S::zero();
                    for (&y, &gv) in yrow.iter().zip(grow) {
                        dot += y * gv;
                    }
                    dx.extend(yrow.iter().zip(grow).map(|(&y, &gv)| y * (gv - dot)));
                }
                add_to(grads, *x, Tensor::new(&[n, k], dx)?)?;
            }
            Op::MixKernels { routing, experts } => {
                let rv = self.value(*routing);
                let ev = self.value(*experts);
                let k = rv.shape()[1];
                let m = ev.len() / k;
                if self.requires(*routing) {
                    let mut dr = vec![S::zero(); k];
                    for ke in 0..k {
                        let mut acc = S::zero();
                        for (gv, evv) in g.data().iter().zip(&ev.data()[ke * m..(ke + 1) * m]) {
                            acc += *gv * *evv;
                        }
                        dr[ke] = acc;
                    }
                    add_to(grads, *routing, Tensor::new(&[1, k], dr)?)?;
                }
                if self.requires(*experts) {
                    let mut de = vec![S::zero(); k * m];
                    for ke in 0..k {
                        let r = rv.data()[ke];
                        for (d, &gv) in de[ke * m..(ke + 1) * m].iter_mut().zip(g.data()) {
                            *d = r * gv;
                        }
                    }
                    add_to(grads, *experts, Tensor::new(ev.shape(), de)?)?;
                }
            }
            Op::ScaleByElement { x, s, index } => {
                let sv = self.value(*s).data()[*index];
                if self.requires(*x) {
                    add_to(grads, *x, g.map(|v| v * sv))?;
                }
                if self.requires(*s) {
                    let xv = self.value(*x);
                    let mut acc = S::zero();
                    for (&gv, &xvv) in g.data().iter().zip(xv.data()) {
                        acc += gv * xvv;
                    }
                    let mut ds = Tensor::zeros(self.value(*s).shape());
                    ds.data_mut()[*index] = acc;
                    add_to(grads, *s, ds)?;
                }
            }
            Op::ChannelNorm { x, gain, bias, eps } => {
                self.channel_norm_backward(*x, *gain, *bias, *eps, g, grads, add_to)?;
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                add_to(grads, *x, Tensor::filled(self.value(*x).shape(), gv))?;
            }
            Op::DotConst { x, weights } => {
                let gv = g.data()[0];
                let d = Tensor::new(
                    self.value(*x).shape(),
                    weights.iter().map(|&w| gv * S::from_f64(w)).collect(),
                )?;
                add_to(grads, *x, d)?;
            }
            Op::Custom { inputs, grad } => {
                let values: Vec<&Tensor<S>> = inputs.iter().map(|&v| self.value(v)).collect();
                let mut local: Vec<Tensor<S>> =
                    values.iter().map(|v| Tensor::zeros(v.shape())).collect();
                grad.backward(&values, g, &mut local);
                for (&var, delta) in inputs.iter().zip(local) {
                    if self.requires(var) {
                        add_to(grads, var, delta)?;
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn channel_norm_backward(
        &self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        add_to: impl Fn(&mut [Option<Tensor<S>>], Var, Tensor<S>) -> Result<()>,
    ) -> Result<()> {
        let xv = self.value(x);
        let gd = self.value(gain).data();
        let (n, c, h, w) = xv.dims4()?;
        let hw = h * w;
        let inv = S::from_f64(1.0 / hw as f64);
        let epsv = S::from_f64(eps);
        let mut dx = Tensor::zeros(xv.shape());
        let mut dgain = vec![S::zero(); c];
        let mut dbias = vec![S::zero(); c];
        for bn in 0..n {
            for ci in 0..c {
                let base = (bn * c + ci) * hw;
                let xs = &xv.data()[base..base + hw];
                let gs = &g.data()[base..base + hw];
                let mut mean = S::zero();
                for &v in xs {
                    mean += v;
                }
                mean = mean * inv;
                let mut var = S::zero();
                for &v in xs {
                    var += (v - mean) * (v - mean);
                }
                var = var * inv;
                let istd = S::one() / (var + epsv).sqrt();
                let mut gmean = S::zero();
                let mut gxhat = S::zero();
                for (&gv, &xvv) in gs.iter().zip(xs) {
                    gmean += gv;
                    gxhat += gv * (xvv - mean) * istd;
                }
                dgain[ci] += gxhat;
                dbias[ci] += gmean;
                gmean = gmean * inv;
                let gxhat_mean = gxhat * inv;
                let scale = gd[ci] * istd;
                for (i, (&gv, &xvv)) in gs.iter().zip(xs).enumerate() {
                    let xhat = (xvv - mean) * istd;
                    dx.data_mut()[base + i] += scale * (gv - gmean - xhat * gxhat_mean);
                }
            }
        }
        if self.requires(x) {
            add_to(grads, x, dx)?;
        }
        if self.requires(gain) {
            add_to(grads, gain, Tensor::new(&[c], dgain)?)?;
        }
        if self.requires(bias) {
            add_to(grads, bias, Tensor::new(&[c], dbias)?)?;
        }
        Ok(())
    }
}

#[inline]
fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    // Evaluate through exp of a non-positive argument for stability.
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Standard reshape-transpose channel permutation: output channel
/// `g*(c mod C/g) + c/(C/g)` reads input channel `c`.
fn shuffle_channels<S: Scalar>(
    x: &Tensor<S>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    groups: usize,
) -> Tensor<S> {
    let hw = h * w;
    let per = c / groups;
    let mut out = vec![S::zero(); x.len()];
    let xd = x.data();
    for bn in 0..n {
        for src in 0..c {
            let dst = (src % per) * groups + src / per;
            let a = (bn * c + src) * hw;
            let b = (bn * c + dst) * hw;
            out[b..b + hw].copy_from_slice(&xd[a..a + hw]);
        }
    }
    Tensor::new(&[n, c, h, w], out).expect("shuffle preserves volume")
}

/// Maximum relative error between an analytic gradient and central finite
/// differences of `f`, using the normalization
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn finite_diff_max_rel_err<F>(
    f: F,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    eps: f64,
) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..probe[ti].len() {
            let orig = probe[ti].data()[i];
            probe[ti].data_mut()[i] = orig + eps;
            let up = f(&probe)?;
            probe[ti].data_mut()[i] = orig - eps;
            let down = f(&probe)?;
            probe[ti].data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(TensorError::NonFinite {
                    context: String::from("finite-difference probe"),
                });
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / (1e-12f64).max(a.abs() + numeric.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64_slice(&[2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap(), true);
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_matches_analytic() {
        // loss = sum(x*x), grad = 2x; at x = 3 the gradient is 6.
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::scalar(3.0), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::scalar(1.0), true);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss).unwrap_err(), TensorError::TapeConsumed);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[3]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar { len: 3 })));
    }

    #[test]
    fn relu6_clamps_both_sides() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64_slice(&[3], &[7.5, -1.0, 3.0]).unwrap(), false);
        let y = tape.relu6(x).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0, 0.0, 3.0]);
    }

    #[test]
    fn concat_shapes_add_on_channel_axis() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(Tensor::zeros(&[1, 2, 4, 4]), false);
        let b = tape.input(Tensor::zeros(&[1, 3, 4, 4]), false);
        let y = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 5, 4, 4]);
    }

    #[test]
    fn global_avg_pool_means_per_channel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(
            Tensor::from_f64_slice(&[1, 2, 2, 2], &[1.0, 3.0, 5.0, 7.0, 2.0, 2.0, 2.0, 2.0])
                .unwrap(),
            false,
        );
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 2.0]);
    }

    #[test]
    fn channel_shuffle_permutation_c6_g2() {
        // Channels [0,1,2,3,4,5] with 2 groups interleave to [0,3,1,4,2,5].
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..6).map(|c| c as f64).collect();
        let x = tape.input(Tensor::new(&[1, 6, 1, 1], data).unwrap(), false);
        let y = tape.channel_shuffle(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let x1 = tape.input(Tensor::new(&[1, 6, 1, 1], (0..6).map(|c| c as f64).collect()).unwrap(), false);
        let id = tape.channel_shuffle(x1, 1).unwrap();
        assert_eq!(tape.value(id).data(), tape.value(x1).data());
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::scalar(1e308), false);
        let y = tape.affine(x, 10.0, 0.0);
        assert!(matches!(y, Err(TensorError::NonFinite { .. })));
    }
}
