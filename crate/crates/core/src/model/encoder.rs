//! Hierarchical Mix-Transformer encoder.

use rand::Rng;

use super::config::{EncoderConfig, StageConfig};
use super::layers::{Conv, Ctx, LayerNorm, Linear, LN_EPS};
use super::params::Builder;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Graph, NodeId, Scalar};

/// `[N, L, C]` tokens → `[N, C, h, w]` grid.
pub fn tokens_to_grid<T: Scalar>(g: &mut Graph<T>, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(shape_err!("expected [N, {}, C] tokens for a {h}x{w} grid, got {s:?}", h * w));
    }
    let t = g.permute(x, &[0, 2, 1])?;
    g.reshape(t, &[s[0], s[2], h, w])
}

/// `[N, C, h, w]` grid → `[N, h·w, C]` tokens.
pub fn grid_to_tokens<T: Scalar>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err!("expected NCHW grid, got {s:?}"));
    }
    let t = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(t, &[0, 2, 1])
}

/// Weights of an overlapping patch embedding, already bound to a graph.
#[derive(Debug, Clone, Copy)]
pub struct PatchEmbedWeights {
    pub conv_w: NodeId,
    pub conv_b: NodeId,
    pub norm_g: NodeId,
    pub norm_b: NodeId,
}

/// Strided convolution with kernel larger than stride, flattened to tokens
/// and layer-normalized. Returns `(tokens, out_h, out_w)`.
pub fn overlap_patch_embed<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    wts: &PatchEmbedWeights,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(NodeId, usize, usize)> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err!("patch embedding input must be NCHW, got {s:?}"));
    }
    if s[2] % stride != 0 || s[3] % stride != 0 {
        return Err(shape_err!(
            "patch embedding input {}x{} must be a multiple of {stride}",
            s[2],
            s[3]
        ));
    }
    let ws = g.shape(wts.conv_w);
    if ws.len() != 4 || ws[2] != kernel || ws[3] != kernel {
        return Err(shape_err!("patch embedding weight {ws:?} does not have a {kernel}x{kernel} kernel"));
    }
    let y = g.conv2d(x, wts.conv_w, Some(wts.conv_b), (stride, stride), (pad, pad), 1)?;
    let ys = g.shape(y).to_vec();
    let (oh, ow, c) = (ys[2], ys[3], ys[1]);
    let t = grid_to_tokens(g, y)?;
    let t = g.layer_norm(t, c, wts.norm_g, wts.norm_b, LN_EPS)?;
    Ok((t, oh, ow))
}

#[derive(Debug, Clone, Copy)]
pub struct ReductionWeights {
    pub conv_w: NodeId,
    pub conv_b: NodeId,
    pub norm_g: NodeId,
    pub norm_b: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub q_w: NodeId,
    pub q_b: NodeId,
    pub k_w: NodeId,
    pub k_b: NodeId,
    pub v_w: NodeId,
    pub v_b: NodeId,
    pub proj_w: NodeId,
    pub proj_b: NodeId,
    /// Present iff the spatial-reduction ratio is above 1.
    pub reduction: Option<ReductionWeights>,
}

fn split_heads<T: Scalar>(g: &mut Graph<T>, x: NodeId, heads: usize) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let t = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    g.permute(t, &[0, 2, 1, 3])
}

/// Multi-head self-attention whose keys and values come from a spatially
/// reduced copy of the token grid.
#[allow(clippy::too_many_arguments)]
pub fn efficient_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    wts: &AttentionWeights,
    num_heads: usize,
    sr_ratio: usize,
    h: usize,
    w: usize,
) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(shape_err!("attention tokens {s:?} do not form a {h}x{w} grid"));
    }
    let (n, l, c) = (s[0], s[1], s[2]);
    if c % num_heads != 0 {
        return Err(shape_err!("channels {c} not divisible by {num_heads} heads"));
    }
    if sr_ratio == 0 || h % sr_ratio != 0 || w % sr_ratio != 0 {
        return Err(shape_err!("sr_ratio {sr_ratio} must divide the {h}x{w} token grid"));
    }
    let q = g.linear(x, wts.q_w, Some(wts.q_b))?;
    let kv_src = match (sr_ratio > 1, &wts.reduction) {
        (true, Some(r)) => {
            let grid = tokens_to_grid(g, x, h, w)?;
            let red = g.conv2d(grid, r.conv_w, Some(r.conv_b), (sr_ratio, sr_ratio), (0, 0), 1)?;
            let t = grid_to_tokens(g, red)?;
            g.layer_norm(t, c, r.norm_g, r.norm_b, LN_EPS)?
        }
        (false, None) => x,
        _ => return Err(invalid!("reduction weights must be present iff sr_ratio > 1")),
    };
    let k = g.linear(kv_src, wts.k_w, Some(wts.k_b))?;
    let v = g.linear(kv_src, wts.v_w, Some(wts.v_b))?;
    let (q, k, v) = (
        split_heads(g, q, num_heads)?,
        split_heads(g, k, num_heads)?,
        split_heads(g, v, num_heads)?,
    );
    let a = g.attention(q, k, v)?;
    let a = g.permute(a, &[0, 2, 1, 3])?;
    let a = g.reshape(a, &[n, l, c])?;
    g.linear(a, wts.proj_w, Some(wts.proj_b))
}

#[derive(Debug, Clone, Copy)]
pub struct FfnWeights {
    pub fc1_w: NodeId,
    pub fc1_b: NodeId,
    pub dw_w: NodeId,
    pub dw_b: NodeId,
    pub fc2_w: NodeId,
    pub fc2_b: NodeId,
}

/// Feed-forward with a depthwise 3×3 convolution between the two linears.
pub fn mix_ffn<T: Scalar>(g: &mut Graph<T>, x: NodeId, wts: &FfnWeights, h: usize, w: usize) -> Result<NodeId> {
    let hidden = g.linear(x, wts.fc1_w, Some(wts.fc1_b))?;
    let e = *g.shape(hidden).last().unwrap();
    let grid = tokens_to_grid(g, hidden, h, w)?;
    let grid = g.conv2d(grid, wts.dw_w, Some(wts.dw_b), (1, 1), (1, 1), e)?;
    let t = grid_to_tokens(g, grid)?;
    let t = g.gelu(t);
    g.linear(t, wts.fc2_w, Some(wts.fc2_b))
}

// ---------------------------------------------------------------------------
// parameterized modules
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    sr: Option<(Conv, LayerNorm)>,
    heads: usize,
    sr_ratio: usize,
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    dw: Conv,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Stage {
    patch: Conv,
    patch_norm: LayerNorm,
    blocks: Vec<Block>,
    norm: LayerNorm,
    cfg: StageConfig,
}

#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    stages: Vec<Stage>,
}

impl Attention {
    fn new<T: Scalar, R: Rng>(bd: &mut Builder<T, R>, c: usize, heads: usize, sr_ratio: usize) -> Result<Self> {
        bd.push("attn");
        let q = Linear::new(bd, "q", c, c, true)?;
        let k = Linear::new(bd, "k", c, c, true)?;
        let v = Linear::new(bd, "v", c, c, true)?;
        let proj = Linear::new(bd, "proj", c, c, true)?;
        let sr = if sr_ratio > 1 {
            Some((
                Conv::new(bd, "sr", c, c, sr_ratio, sr_ratio, 0, 1, true)?,
                LayerNorm::new(bd, "sr_norm", c)?,
            ))
        } else {
            None
        };
        bd.pop();
        Ok(Self { q, k, v, proj, sr, heads, sr_ratio })
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let pair = |l: &Linear| (cx.p(l.weight()), cx.p(l.bias().unwrap()));
        let (q_w, q_b) = pair(&self.q);
        let (k_w, k_b) = pair(&self.k);
        let (v_w, v_b) = pair(&self.v);
        let (proj_w, proj_b) = pair(&self.proj);
        let reduction = self.sr.as_ref().map(|(conv, norm)| ReductionWeights {
            conv_w: cx.p(conv.weight()),
            conv_b: cx.p(conv.bias().unwrap()),
            norm_g: cx.p(norm.gain()),
            norm_b: cx.p(norm.offset()),
        });
        let wts = AttentionWeights { q_w, q_b, k_w, k_b, v_w, v_b, proj_w, proj_b, reduction };
        efficient_self_attention(cx.g, x, &wts, self.heads, self.sr_ratio, h, w)
    }
}

impl Block {
    fn new<T: Scalar, R: Rng>(bd: &mut Builder<T, R>, c: usize, heads: usize, sr: usize, expansion: usize) -> Result<Self> {
        let norm1 = LayerNorm::new(bd, "norm1", c)?;
        let attn = Attention::new(bd, c, heads, sr)?;
        let norm2 = LayerNorm::new(bd, "norm2", c)?;
        let e = c * expansion;
        bd.push("mlp");
        let fc1 = Linear::new(bd, "fc1", c, e, true)?;
        let dw = Conv::new(bd, "dwconv", e, e, 3, 1, 1, e, true)?;
        let fc2 = Linear::new(bd, "fc2", e, c, true)?;
        bd.pop();
        Ok(Self { norm1, attn, norm2, fc1, dw, fc2 })
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let y = self.norm1.forward(cx, x)?;
        let y = self.attn.forward(cx, y, h, w)?;
        let x = cx.g.add(x, y)?;
        let y = self.norm2.forward(cx, x)?;
        let wts = FfnWeights {
            fc1_w: cx.p(self.fc1.weight()),
            fc1_b: cx.p(self.fc1.bias().unwrap()),
            dw_w: cx.p(self.dw.weight()),
            dw_b: cx.p(self.dw.bias().unwrap()),
            fc2_w: cx.p(self.fc2.weight()),
            fc2_b: cx.p(self.fc2.bias().unwrap()),
        };
        let y = mix_ffn(cx.g, y, &wts, h, w)?;
        cx.g.add(x, y)
    }
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(bd: &mut Builder<T, R>, cfg: &EncoderConfig) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = 3;
        bd.push("encoder");
        for (i, s) in cfg.stages.iter().enumerate() {
            bd.push(format!("stage{}", i + 1));
            bd.push("patch_embed");
            let patch = Conv::new(bd, "proj", cin, s.embed_dim, s.patch_kernel, s.patch_stride, s.patch_pad, 1, true)?;
            let patch_norm = LayerNorm::new(bd, "norm", s.embed_dim)?;
            bd.pop();
            let mut blocks = Vec::new();
            for b in 0..s.depth {
                bd.push(format!("block{b}"));
                blocks.push(Block::new(bd, s.embed_dim, s.num_heads, s.sr_ratio, cfg.mlp_expansion)?);
                bd.pop();
            }
            let norm = LayerNorm::new(bd, "norm", s.embed_dim)?;
            bd.pop();
            stages.push(Stage { patch, patch_norm, blocks, norm, cfg: s.clone() });
            cin = s.embed_dim;
        }
        bd.pop();
        Ok(Self { stages })
    }

    /// Four NCHW feature maps at strides 4, 8, 16, 32.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, image: NodeId) -> Result<Vec<NodeId>> {
        let mut x = image;
        let mut feats = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let wts = PatchEmbedWeights {
                conv_w: cx.p(st.patch.weight()),
                conv_b: cx.p(st.patch.bias().unwrap()),
                norm_g: cx.p(st.patch_norm.gain()),
                norm_b: cx.p(st.patch_norm.offset()),
            };
            let (mut t, h, w) = overlap_patch_embed(cx.g, x, &wts, st.cfg.patch_kernel, st.cfg.patch_stride, st.cfg.patch_pad)?;
            for b in &st.blocks {
                t = b.forward(cx, t, h, w)?;
            }
            let t = st.norm.forward(cx, t)?;
            x = tokens_to_grid(cx.g, t, h, w)?;
            feats.push(x);
        }
        Ok(feats)
    }
}
