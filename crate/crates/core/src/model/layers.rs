//! Parameter-index layer descriptions and the per-forward binding context.

use rand::Rng;

use super::params::{Builder, ParamStore};
use crate::error::Result;
use crate::tensor::{Graph, NodeId, Scalar};

pub(crate) const LN_EPS: f64 = 1e-6;
pub(crate) const BN_EPS: f64 = 1e-5;

/// Batch statistics observed by one batch-norm layer in a training forward.
#[derive(Debug, Clone)]
pub struct BnBatchStats<T> {
    pub mean_buffer: usize,
    pub var_buffer: usize,
    pub mean: Vec<T>,
    /// Unbiased variance over `N·H·W` samples.
    pub var: Vec<T>,
}

/// Binds a parameter store onto a graph for one forward pass.
pub(crate) struct Ctx<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    pub ids: Vec<NodeId>,
    pub buffers: &'a [crate::tensor::Tensor<T>],
    pub train: bool,
    pub bn_stats: Vec<BnBatchStats<T>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn bind(g: &'a mut Graph<T>, store: &'a ParamStore<T>, train: bool) -> Self {
        let ids = store.tensors().iter().map(|t| g.param(t.clone())).collect();
        Self {
            g,
            ids,
            buffers: store.buffers(),
            train,
            bn_stats: Vec::new(),
        }
    }

    /// Uses parameter nodes already on the graph.
    pub fn with_ids(g: &'a mut Graph<T>, store: &'a ParamStore<T>, ids: Vec<NodeId>, train: bool) -> Self {
        Self {
            g,
            ids,
            buffers: store.buffers(),
            train,
            bn_stats: Vec::new(),
        }
    }

    pub fn p(&self, i: usize) -> NodeId {
        self.ids[i]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: usize,
    b: Option<usize>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(bd: &mut Builder<T, R>, name: &str, fin: usize, fout: usize, bias: bool) -> Result<Self> {
        bd.push(name);
        let w = bd.trunc_normal("weight", &[fout, fin], 0.02)?;
        let b = if bias { Some(bd.constant("bias", &[fout], 0.0)?) } else { None };
        bd.pop();
        Ok(Self { w, b })
    }

    pub fn weight(&self) -> usize {
        self.w
    }

    pub fn bias(&self) -> Option<usize> {
        self.b
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        bd: &mut Builder<T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        bd.push(name);
        // fan-out scaled normal
        let fan_out = k * k * cout / groups;
        let w = bd.normal("weight", &[cout, cin / groups, k, k], (2.0 / fan_out as f64).sqrt())?;
        let b = if bias { Some(bd.constant("bias", &[cout], 0.0)?) } else { None };
        bd.pop();
        Ok(Self { w, b, stride, pad, groups })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: NodeId) -> Result<NodeId> {
        let (w, b) = (cx.p(self.w), self.b.map(|b| cx.p(b)));
        cx.g.conv2d(x, w, b, (self.stride, self.stride), (self.pad, self.pad), self.groups)
    }

    pub fn weight(&self) -> usize {
        self.w
    }

    pub fn bias(&self) -> Option<usize> {
        self.b
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    gain: usize,
    offset: usize,
    dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng>(bd: &mut Builder<T, R>, name: &str, dim: usize) -> Result<Self> {
        bd.push(name);
        let gain = bd.constant("weight", &[dim], 1.0)?;
        let offset = bd.constant("bias", &[dim], 0.0)?;
        bd.pop();
        Ok(Self { gain, offset, dim })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: NodeId) -> Result<NodeId> {
        let (g, o) = (cx.p(self.gain), cx.p(self.offset));
        cx.g.layer_norm(x, self.dim, g, o, LN_EPS)
    }

    pub fn gain(&self) -> usize {
        self.gain
    }

    pub fn offset(&self) -> usize {
        self.offset
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    gain: usize,
    offset: usize,
    mean: usize,
    var: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar, R: Rng>(bd: &mut Builder<T, R>, name: &str, c: usize) -> Result<Self> {
        bd.push(name);
        let gain = bd.constant("weight", &[c], 1.0)?;
        let offset = bd.constant("bias", &[c], 0.0)?;
        let mean = bd.buffer("running_mean", &[c], 0.0)?;
        let var = bd.buffer("running_var", &[c], 1.0)?;
        bd.pop();
        Ok(Self { gain, offset, mean, var })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: NodeId) -> Result<NodeId> {
        let (g, o) = (cx.p(self.gain), cx.p(self.offset));
        if cx.train {
            let s = cx.g.shape(x);
            let count = s[0] * s[2] * s[3];
            let (y, mean, var) = cx.g.batch_norm_train(x, g, o, BN_EPS)?;
            let unbias = if count > 1 { T::of(count as f64 / (count - 1) as f64) } else { T::one() };
            cx.bn_stats.push(BnBatchStats {
                mean_buffer: self.mean,
                var_buffer: self.var,
                mean,
                var: var.into_iter().map(|v| v * unbias).collect(),
            });
            Ok(y)
        } else {
            let bufs = cx.buffers;
            let (m, v) = (bufs[self.mean].data(), bufs[self.var].data());
            cx.g.batch_norm_eval(x, g, o, m, v, BN_EPS)
        }
    }
}
