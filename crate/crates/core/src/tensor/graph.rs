use super::kernels::{self, ConvGeom};
use super::{numel_of, Scalar, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One executed operation as seen from outside the graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpRecord {
    pub name: &'static str,
    pub inputs: Vec<NodeId>,
    pub output: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        probs: Vec<T>,
        dims: (usize, usize, usize, usize),
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        offset: NodeId,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    BatchNorm {
        x: NodeId,
        gain: NodeId,
        offset: NodeId,
        mean: Vec<T>,
        rstd: Vec<T>,
        batch_stats: bool,
    },
    Upsample {
        x: NodeId,
        scale: usize,
    },
    Unary {
        x: NodeId,
        kind: Unary,
    },
    Softmax {
        x: NodeId,
        axis: usize,
        log: bool,
    },
    Binary {
        a: NodeId,
        b: NodeId,
        kind: Binary,
    },
    AddScalar {
        x: NodeId,
    },
    MulScalar {
        x: NodeId,
        c: T,
    },
    PowScalar {
        x: NodeId,
        p: T,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Reshape {
        x: NodeId,
    },
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Attention { .. } => "attention",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::Unary { kind, .. } => match kind {
                Unary::Relu => "relu",
                Unary::Gelu => "gelu",
                Unary::Sigmoid => "sigmoid",
                Unary::Exp => "exp",
                Unary::Log => "log",
            },
            Op::Softmax { log: false, .. } => "softmax",
            Op::Softmax { log: true, .. } => "log_softmax",
            Op::Binary { kind, .. } => match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            },
            Op::AddScalar { .. } => "add_scalar",
            Op::MulScalar { .. } => "mul_scalar",
            Op::PowScalar { .. } => "pow_scalar",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::LayerNorm { x, gain, offset, .. } | Op::BatchNorm { x, gain, offset, .. } => {
                vec![*x, *gain, *offset]
            }
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Upsample { x, .. }
            | Op::Unary { x, .. }
            | Op::Softmax { x, .. }
            | Op::AddScalar { x }
            | Op::MulScalar { x, .. }
            | Op::PowScalar { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::GlobalAvgPool { x }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Slice { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed operations. Nodes are appended in execution order, so
/// the node list is always a topological order of the computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input tensor. Leaves with `requires_grad` receive gradients
    /// from [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] root with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    /// The executed operations in order, excluding leaves.
    pub fn records(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| !matches!(n.op, Op::Leaf))
            .map(|(i, n)| OpRecord {
                name: n.op.name(),
                inputs: n.op.inputs(),
                output: NodeId(i),
            })
            .collect()
    }

    // -----------------------------------------------------------------------
    // operators
    // -----------------------------------------------------------------------

    /// 2-D convolution over NCHW input with OIHW weight.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 {
            return Err(shape_err!("conv2d input must be NCHW, got {xs:?}"));
        }
        if ws.len() != 4 {
            return Err(shape_err!("conv2d weight must be OIHW, got {ws:?}"));
        }
        if groups == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(invalid!("conv2d groups and stride must be positive"));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, ci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if c % groups != 0 {
            return Err(shape_err!(
                "conv2d in-channels (dim 1 of input) = {c} not divisible by groups = {groups}"
            ));
        }
        if o % groups != 0 {
            return Err(shape_err!(
                "conv2d out-channels (dim 0 of weight) = {o} not divisible by groups = {groups}"
            ));
        }
        if ci != c / groups {
            return Err(shape_err!(
                "conv2d weight in-channels (dim 1 of weight) = {ci}, expected {} (= {c}/{groups})",
                c / groups
            ));
        }
        if h + 2 * padding.0 < kh || wd + 2 * padding.1 < kw {
            return Err(shape_err!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding.0,
                wd + 2 * padding.1
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err!(
                    "conv2d bias (dim 0) must have {o} entries, got {:?}",
                    self.shape(b)
                ));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            groups,
            oh: (h + 2 * padding.0 - kh) / stride.0 + 1,
            ow: (wd + 2 * padding.1 - kw) / stride.1 + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_parts(vec![n, o, geom.oh, geom.ow], out);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }))
    }

    /// `softmax(q k^T / sqrt(d)) v` over inputs shaped `[.., L, d]`,
    /// `[.., M, d]`, `[.., M, d]` with identical leading axes.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k);
        let vs = self.shape(v);
        let r = qs.len();
        if r < 2 || ks.len() != r || vs.len() != r {
            return Err(shape_err!(
                "attention operands must share rank >= 2: q {qs:?}, k {ks:?}, v {vs:?}"
            ));
        }
        if qs[..r - 2] != ks[..r - 2] || ks[..r - 2] != vs[..r - 2] {
            return Err(shape_err!(
                "attention batch/head axes differ: q {qs:?}, k {ks:?}, v {vs:?}"
            ));
        }
        let (l, d) = (qs[r - 2], qs[r - 1]);
        let m = ks[r - 2];
        if ks[r - 1] != d || vs[r - 1] != d || vs[r - 2] != m {
            return Err(shape_err!(
                "attention head dims differ: q {qs:?}, k {ks:?}, v {vs:?}"
            ));
        }
        for (name, id) in [("q", q), ("k", k), ("v", v)] {
            if !self.value(id).all_finite() {
                return Err(Error::NonFinite(format!("attention input {name}")));
            }
        }
        let batches: usize = qs[..r - 2].iter().product();
        let scale = T::one() / T::of(d as f64).sqrt();
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            batches,
            l,
            m,
            d,
            scale,
        );
        let value = Tensor::from_parts(qs, out);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                probs,
                dims: (batches, l, m, d),
            },
        ))
    }

    /// Attention probabilities retained by an attention node.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Normalizes over the last axis, then applies `gain` and `offset`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        normalized_extent: usize,
        gain: NodeId,
        offset: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(invalid!("layer_norm eps must be positive, got {eps}"));
        }
        let xs = self.shape(x);
        if xs.last() != Some(&normalized_extent) {
            return Err(shape_err!(
                "layer_norm last axis of {xs:?} must equal {normalized_extent}"
            ));
        }
        for (name, id) in [("gain", gain), ("offset", offset)] {
            if self.shape(id) != [normalized_extent] {
                return Err(shape_err!(
                    "layer_norm {name} must have shape [{normalized_extent}], got {:?}",
                    self.shape(id)
                ));
            }
        }
        let (out, means, rstds) = kernels::layer_norm_forward(
            self.value(x).data(),
            normalized_extent,
            self.value(gain).data(),
            self.value(offset).data(),
            T::of(eps),
        );
        let value = Tensor::from_parts(xs.to_vec(), out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                offset,
                means,
                rstds,
            },
        ))
    }

    fn check_bn(&self, x: NodeId, gain: NodeId, offset: NodeId) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(shape_err!("batch_norm input must be NCHW, got {xs:?}"));
        }
        let c = xs[1];
        for (name, id) in [("gain", gain), ("offset", offset)] {
            if self.shape(id) != [c] {
                return Err(shape_err!(
                    "batch_norm {name} must have shape [{c}], got {:?}",
                    self.shape(id)
                ));
            }
        }
        Ok((xs[0], c, xs[2] * xs[3]))
    }

    /// Batch normalization using the statistics of this batch. Returns the
    /// output node plus the per-channel batch mean and biased variance.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gain: NodeId,
        offset: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<T>, Vec<T>)> {
        if eps <= 0.0 {
            return Err(invalid!("batch_norm eps must be positive, got {eps}"));
        }
        let (n, c, hw) = self.check_bn(x, gain, offset)?;
        let (mean, var) = kernels::channel_stats(self.value(x).data(), n, c, hw);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let out = kernels::batch_norm_apply(
            self.value(x).data(),
            n,
            c,
            hw,
            &mean,
            &rstd,
            self.value(gain).data(),
            self.value(offset).data(),
        );
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        let id = self.push(
            value,
            Op::BatchNorm {
                x,
                gain,
                offset,
                mean: mean.clone(),
                rstd,
                batch_stats: true,
            },
        );
        Ok((id, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gain: NodeId,
        offset: NodeId,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(invalid!("batch_norm eps must be positive, got {eps}"));
        }
        let (n, c, hw) = self.check_bn(x, gain, offset)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err!("batch_norm running statistics must have {c} entries"));
        }
        let rstd: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + T::of(eps)).sqrt())
            .collect();
        let out = kernels::batch_norm_apply(
            self.value(x).data(),
            n,
            c,
            hw,
            running_mean,
            &rstd,
            self.value(gain).data(),
            self.value(offset).data(),
        );
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gain,
                offset,
                mean: running_mean.to_vec(),
                rstd,
                batch_stats: false,
            },
        ))
    }

    /// Bilinear upsampling of an NCHW map by an integer factor (half-pixel
    /// centers, corners not aligned).
    pub fn bilinear_upsample(&mut self, x: NodeId, scale: usize) -> Result<NodeId> {
        if scale < 2 {
            return Err(invalid!("bilinear_upsample scale must be >= 2, got {scale}"));
        }
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(shape_err!("bilinear_upsample input must be NCHW, got {xs:?}"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let out = kernels::upsample_forward(self.value(x).data(), n * c, h, w, scale);
        let value = Tensor::from_parts(vec![n, c, h * scale, w * scale], out);
        Ok(self.push(value, Op::Upsample { x, scale }))
    }

    fn unary(&mut self, x: NodeId, kind: Unary) -> NodeId {
        let f: fn(T) -> T = match kind {
            Unary::Relu => |v| v.max(T::zero()),
            Unary::Gelu => kernels::gelu,
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Exp => T::exp,
            Unary::Log => T::ln,
        };
        let value = self.value(x).map(f);
        self.push(value, Op::Unary { x, kind })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Relu)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::NonFinite("log of a non-positive value".into()));
        }
        Ok(self.unary(x, Unary::Log))
    }

    fn softmax_impl(&mut self, x: NodeId, axis: usize, log: bool) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(shape_err!("softmax axis {axis} out of range for {xs:?}"));
        }
        if xs[axis] == 0 {
            return Err(shape_err!("softmax over empty axis {axis}"));
        }
        let out = kernels::softmax_forward(self.value(x).data(), &xs, axis, log);
        Ok(self.push(Tensor::from_parts(xs, out), Op::Softmax { x, axis, log }))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.softmax_impl(x, axis, true)
    }

    fn broadcast_shape(&self, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let rank = sa.len().max(sb.len());
        let mut out = vec![0; rank];
        for (i, slot) in out.iter_mut().enumerate() {
            let da = if i + sa.len() >= rank { sa[i + sa.len() - rank] } else { 1 };
            let db = if i + sb.len() >= rank { sb[i + sb.len() - rank] } else { 1 };
            *slot = match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(shape_err!(
                        "cannot broadcast {sa:?} with {sb:?} (dim {i}: {da} vs {db})"
                    ))
                }
            };
        }
        Ok(out)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, kind: Binary) -> Result<NodeId> {
        let out_shape = self.broadcast_shape(a, b)?;
        let f: fn(T, T) -> T = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let (va, vb) = (self.value(a), self.value(b));
        let data: Vec<T> = if va.shape() == out_shape.as_slice() && vb.shape() == out_shape.as_slice() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = kernels::broadcast_map(&out_shape, va.shape());
            let mb = kernels::broadcast_map(&out_shape, vb.shape());
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
                .collect()
        };
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Binary { a, b, kind }))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Binary::Sub)
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Binary::Div)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = T::of(c);
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar { x })
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = T::of(c);
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::MulScalar { x, c })
    }

    /// `x^p` for non-negative `x`. The derivative at `x = 0` is taken as 0.
    pub fn pow_scalar(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        if self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(invalid!("pow_scalar requires non-negative base"));
        }
        let p = T::of(p);
        let value = self.value(x).map(|v| v.powf(p));
        Ok(self.push(value, Op::PowScalar { x, p }))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean { x })
    }

    /// NCHW → NC by averaging over space.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(shape_err!("global_avg_pool input must be NCHW, got {xs:?}"));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let inv = T::one() / T::of(hw as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n, c], data), Op::GlobalAvgPool { x }))
    }

    /// `x @ w^T + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        if ws.len() != 2 {
            return Err(shape_err!("linear weight must be [out, in], got {ws:?}"));
        }
        let (out_f, in_f) = (ws[0], ws[1]);
        if xs.last() != Some(&in_f) {
            return Err(shape_err!(
                "linear input last axis of {xs:?} must equal weight in-features (dim 1) = {in_f}"
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [out_f] {
                return Err(shape_err!(
                    "linear bias must have shape [{out_f}], got {:?}",
                    self.shape(b)
                ));
            }
        }
        let rows = numel_of(&xs) / in_f;
        let mut out = vec![T::zero(); rows * out_f];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(out_f) {
                row.copy_from_slice(bv);
            }
        }
        kernels::gemm(
            rows,
            in_f,
            out_f,
            self.value(x).data(),
            (in_f, 1),
            self.value(w).data(),
            (1, in_f),
            T::one(),
            &mut out,
            (out_f, 1),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_f;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {perm:?} for shape {xs:?}"));
        }
        let (shape, data) = kernels::permute(self.value(x).data(), &xs, perm);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: NodeId, a: usize, b: usize) -> Result<NodeId> {
        let mut perm: Vec<usize> = (0..self.shape(x).len()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(shape_err!("transpose axes ({a}, {b}) out of range"));
        }
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = match xs.first() {
            Some(&f) => self.shape(f).to_vec(),
            None => return Err(invalid!("concat of zero tensors")),
        };
        if axis >= first.len() {
            return Err(shape_err!("concat axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &id in xs {
            let s = self.shape(id);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(shape_err!(
                    "concat along axis {axis}: {s:?} incompatible with {first:?}"
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::around_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in xs {
                let a = self.shape(id)[axis];
                data.extend_from_slice(&self.value(id).data()[o * a * inner..][..a * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(shape_err!(
                "slice [{start}, {}) along axis {axis} out of range for {xs:?}",
                start + len
            ));
        }
        let (outer, a, inner) = kernels::around_axis(&xs, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * a + start) * inner..][..len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { x, axis, start }))
    }

    // -----------------------------------------------------------------------
    // reverse pass
    // -----------------------------------------------------------------------

    /// Accumulates d(root)/d(node) into every node that requires gradients.
    /// Gradients from earlier calls are discarded.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(shape_err!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_parts(rv.shape().to_vec(), vec![T::one()]));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.propagate(idx, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, idx: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let dy = gout.data();
        let mut acc = |id: NodeId, data: Vec<T>| {
            if !self.needs(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(&data) {
                        *a += *b;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::from_parts(self.shape(id).to_vec(), data));
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let need = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let g = kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), dy, geom, need);
                if let Some(dx) = g.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = g.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, g.db) {
                    acc(*b, db);
                }
            }
            Op::Attention { q, k, v, probs, dims } => {
                let (batches, l, m, d) = *dims;
                let scale = T::one() / T::of(d as f64).sqrt();
                let g = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    dy,
                    batches,
                    l,
                    m,
                    d,
                    scale,
                );
                acc(*q, g.dq);
                acc(*k, g.dk);
                acc(*v, g.dv);
            }
            Op::LayerNorm { x, gain, offset, means, rstds } => {
                let n = *self.shape(*x).last().unwrap();
                let (dx, dg, db) = kernels::layer_norm_backward(
                    self.value(*x).data(),
                    n,
                    self.value(*gain).data(),
                    means,
                    rstds,
                    dy,
                );
                acc(*x, dx);
                acc(*gain, dg);
                acc(*offset, db);
            }
            Op::BatchNorm { x, gain, offset, mean, rstd, batch_stats } => {
                let s = self.shape(*x);
                let (dx, dg, db) = kernels::batch_norm_backward(
                    self.value(*x).data(),
                    s[0],
                    s[1],
                    s[2] * s[3],
                    mean,
                    rstd,
                    self.value(*gain).data(),
                    dy,
                    *batch_stats,
                );
                acc(*x, dx);
                acc(*gain, dg);
                acc(*offset, db);
            }
            Op::Upsample { x, scale } => {
                let s = self.shape(*x);
                acc(*x, kernels::upsample_backward(dy, s[0] * s[1], s[2], s[3], *scale));
            }
            Op::Unary { x, kind } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let dx: Vec<T> = match kind {
                    Unary::Relu => xv
                        .iter()
                        .zip(dy)
                        .map(|(&a, &g)| if a > T::zero() { g } else { T::zero() })
                        .collect(),
                    Unary::Gelu => xv.iter().zip(dy).map(|(&a, &g)| g * kernels::gelu_grad(a)).collect(),
                    Unary::Sigmoid => yv.iter().zip(dy).map(|(&s, &g)| g * s * (T::one() - s)).collect(),
                    Unary::Exp => yv.iter().zip(dy).map(|(&e, &g)| g * e).collect(),
                    Unary::Log => xv.iter().zip(dy).map(|(&a, &g)| g / a).collect(),
                };
                acc(*x, dx);
            }
            Op::Softmax { x, axis, log } => {
                let dx = kernels::softmax_backward(node.value.data(), dy, node.value.shape(), *axis, *log);
                acc(*x, dx);
            }
            Op::Binary { a, b, kind } => {
                let out_shape = node.value.shape();
                let va = self.value(*a);
                let vb = self.value(*b);
                let same = va.shape() == out_shape && vb.shape() == out_shape;
                let ma = (!same).then(|| kernels::broadcast_map(out_shape, va.shape()));
                let mb = (!same).then(|| kernels::broadcast_map(out_shape, vb.shape()));
                let ia = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
                let ib = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); va.numel()];
                    for (i, &g) in dy.iter().enumerate() {
                        let y = vb.data()[ib(i)];
                        da[ia(i)] += match kind {
                            Binary::Add | Binary::Sub => g,
                            Binary::Mul => g * y,
                            Binary::Div => g / y,
                        };
                    }
                    acc(*a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); vb.numel()];
                    for (i, &g) in dy.iter().enumerate() {
                        let x = va.data()[ia(i)];
                        let y = vb.data()[ib(i)];
                        db[ib(i)] += match kind {
                            Binary::Add => g,
                            Binary::Sub => -g,
                            Binary::Mul => g * x,
                            Binary::Div => -g * x / (y * y),
                        };
                    }
                    acc(*b, db);
                }
            }
            Op::AddScalar { x } => acc(*x, dy.to_vec()),
            Op::MulScalar { x, c } => acc(*x, dy.iter().map(|&g| g * *c).collect()),
            Op::PowScalar { x, p } => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(dy)
                    .map(|(&a, &g)| {
                        if a == T::zero() {
                            T::zero()
                        } else {
                            g * *p * a.powf(*p - T::one())
                        }
                    })
                    .collect();
                acc(*x, dx);
            }
            Op::Sum { x } => acc(*x, vec![dy[0]; self.value(*x).numel()]),
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                acc(*x, vec![dy[0] / T::of(n as f64); n]);
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = T::one() / T::of(hw as f64);
                let mut dx = Vec::with_capacity(s.iter().product());
                for &g in dy {
                    dx.extend(std::iter::repeat_n(g * inv, hw));
                }
                acc(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let in_f = self.shape(*w)[1];
                let out_f = self.shape(*w)[0];
                let rows = self.value(*x).numel() / in_f;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * in_f];
                    kernels::gemm(rows, out_f, in_f, dy, (out_f, 1), self.value(*w).data(), (in_f, 1), T::zero(), &mut dx, (in_f, 1));
                    acc(*x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); out_f * in_f];
                    kernels::gemm(out_f, rows, in_f, dy, (1, out_f), self.value(*x).data(), (in_f, 1), T::zero(), &mut dw, (in_f, 1));
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); out_f];
                        for row in dy.chunks(out_f) {
                            for (a, &g) in db.iter_mut().zip(row) {
                                *a += g;
                            }
                        }
                        acc(*b, db);
                    }
                }
            }
            Op::Reshape { x } => acc(*x, dy.to_vec()),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, dx) = kernels::permute(dy, node.value.shape(), &inv);
                acc(*x, dx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = kernels::around_axis(node.value.shape(), *axis);
                let mut start = 0;
                for &id in xs {
                    let a = self.shape(id)[*axis];
                    if self.needs(id) {
                        let mut dx = Vec::with_capacity(outer * a * inner);
                        for o in 0..outer {
                            dx.extend_from_slice(&dy[(o * total + start) * inner..][..a * inner]);
                        }
                        acc(id, dx);
                    }
                    start += a;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, a, inner) = kernels::around_axis(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); xs.iter().product()];
                for o in 0..outer {
                    dx[(o * a + start) * inner..][..len * inner]
                        .copy_from_slice(&dy[o * len * inner..][..len * inner]);
                }
                acc(*x, dx);
            }
        }
        Ok(())
    }
}
