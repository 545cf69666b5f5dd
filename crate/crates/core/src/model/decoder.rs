//! U-Net style decoder with concurrent spatial/channel squeeze-excitation.

use rand::Rng;

use super::config::DecoderConfig;
use super::layers::{BatchNorm, Conv, Ctx, Linear};
use super::params::Builder;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Graph, NodeId, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct ScseWeights {
    /// Channel squeeze: `[C/r, C]` and `[C/r]`.
    pub fc1_w: NodeId,
    pub fc1_b: NodeId,
    /// Channel excitation: `[C, C/r]` and `[C]`.
    pub fc2_w: NodeId,
    pub fc2_b: NodeId,
    /// Spatial gate: 1×1 conv `[1, C, 1, 1]` and `[1]`.
    pub spatial_w: NodeId,
    pub spatial_b: NodeId,
}

/// `x·σ(channel gate) + x·σ(spatial gate)`.
pub fn scse<T: Scalar>(g: &mut Graph<T>, x: NodeId, wts: &ScseWeights) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err!("scSE input must be NCHW, got {s:?}"));
    }
    let (n, c) = (s[0], s[1]);
    let hidden = g.shape(wts.fc1_w)[0];
    if hidden == 0 || c < hidden {
        return Err(invalid!("scSE squeeze width {hidden} must be in 1..={c}"));
    }
    let z = g.global_avg_pool(x)?;
    let z = g.linear(z, wts.fc1_w, Some(wts.fc1_b))?;
    let z = g.relu(z);
    let z = g.linear(z, wts.fc2_w, Some(wts.fc2_b))?;
    let z = g.sigmoid(z);
    let z = g.reshape(z, &[n, c, 1, 1])?;
    let channel = g.mul(x, z)?;
    let q = g.conv2d(x, wts.spatial_w, Some(wts.spatial_b), (1, 1), (0, 0), 1)?;
    let q = g.sigmoid(q);
    let spatial = g.mul(x, q)?;
    g.add(channel, spatial)
}

#[derive(Debug, Clone)]
struct Scse {
    fc1: Linear,
    fc2: Linear,
    spatial: Conv,
}

impl Scse {
    fn new<T: Scalar, R: Rng>(bd: &mut Builder<T, R>, c: usize, reduction: usize) -> Result<Self> {
        bd.push("scse");
        let fc1 = Linear::new(bd, "cse_fc1", c, c / reduction, true)?;
        let fc2 = Linear::new(bd, "cse_fc2", c / reduction, c, true)?;
        let spatial = Conv::new(bd, "sse_conv", c, 1, 1, 1, 0, 1, true)?;
        bd.pop();
        Ok(Self { fc1, fc2, spatial })
    }

    fn weights<T: Scalar>(&self, cx: &Ctx<T>) -> ScseWeights {
        ScseWeights {
            fc1_w: cx.p(self.fc1.weight()),
            fc1_b: cx.p(self.fc1.bias().unwrap()),
            fc2_w: cx.p(self.fc2.weight()),
            fc2_b: cx.p(self.fc2.bias().unwrap()),
            spatial_w: cx.p(self.spatial.weight()),
            spatial_b: cx.p(self.spatial.bias().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    scse: Option<Scse>,
}

impl DecoderBlock {
    fn new<T: Scalar, R: Rng>(bd: &mut Builder<T, R>, cin: usize, cout: usize, cfg: &DecoderConfig) -> Result<Self> {
        let conv1 = Conv::new(bd, "conv1", cin, cout, 3, 1, 1, 1, false)?;
        let bn1 = BatchNorm::new(bd, "bn1", cout)?;
        let conv2 = Conv::new(bd, "conv2", cout, cout, 3, 1, 1, 1, false)?;
        let bn2 = BatchNorm::new(bd, "bn2", cout)?;
        let scse = if cfg.use_scse { Some(Scse::new(bd, cout, cfg.scse_reduction)?) } else { None };
        Ok(Self { conv1, bn1, conv2, bn2, scse })
    }

    /// Upsample ×2, concatenate the skip (if any), two conv-norm-relu
    /// layers, then recalibrate.
    fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: NodeId, skip: Option<NodeId>) -> Result<NodeId> {
        let mut y = cx.g.bilinear_upsample(x, 2)?;
        if let Some(s) = skip {
            let (ys, ss) = (cx.g.shape(y), cx.g.shape(s));
            if ys[2..] != ss[2..] || ys[0] != ss[0] {
                return Err(shape_err!(
                    "decoder skip {ss:?} does not match upsampled input {ys:?} (spatial dims 2, 3)"
                ));
            }
            y = cx.g.concat(&[y, s], 1)?;
        }
        let y = self.conv1.forward(cx, y)?;
        let y = self.bn1.forward(cx, y)?;
        let y = cx.g.relu(y);
        let y = self.conv2.forward(cx, y)?;
        let y = self.bn2.forward(cx, y)?;
        let y = cx.g.relu(y);
        match &self.scse {
            Some(s) => {
                let wts = s.weights(cx);
                scse(cx.g, y, &wts)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    fusion: Vec<DecoderBlock>,
    head_blocks: Vec<DecoderBlock>,
    head: Conv,
}

impl Decoder {
    /// `skip_channels` are the encoder widths, shallowest first.
    pub fn new<T: Scalar, R: Rng>(bd: &mut Builder<T, R>, cfg: &DecoderConfig, skip_channels: &[usize]) -> Result<Self> {
        bd.push("decoder");
        let mut cin = *skip_channels.last().unwrap();
        let mut fusion = Vec::new();
        for (i, &cout) in cfg.fusion_channels.iter().enumerate() {
            let skip = skip_channels[skip_channels.len() - 2 - i];
            bd.push(format!("fuse{}", i + 1));
            fusion.push(DecoderBlock::new(bd, cin + skip, cout, cfg)?);
            bd.pop();
            cin = cout;
        }
        let mut head_blocks = Vec::new();
        for (i, &cout) in cfg.head_channels.iter().enumerate() {
            bd.push(format!("up{}", i + 1));
            head_blocks.push(DecoderBlock::new(bd, cin, cout, cfg)?);
            bd.pop();
            cin = cout;
        }
        let head = Conv::new(bd, "head", cin, cfg.num_classes, 1, 1, 0, 1, true)?;
        bd.pop();
        Ok(Self { fusion, head_blocks, head })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, feats: &[NodeId]) -> Result<NodeId> {
        let mut x = *feats.last().unwrap();
        for (i, b) in self.fusion.iter().enumerate() {
            x = b.forward(cx, x, Some(feats[feats.len() - 2 - i]))?;
        }
        for b in &self.head_blocks {
            x = b.forward(cx, x, None)?;
        }
        self.head.forward(cx, x)
    }
}
