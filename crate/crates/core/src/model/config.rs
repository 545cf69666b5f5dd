use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub sr_ratio: usize,
    pub patch_kernel: usize,
    pub patch_stride: usize,
    pub patch_pad: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub stages: Vec<StageConfig>,
    pub mlp_expansion: usize,
}

/// Decoder channel plan. `fusion_channels` has one entry per skip fusion
/// (deepest first), i.e. one fewer than the encoder has stages, because the
/// deepest feature is the decoder's input rather than a skip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub fusion_channels: Vec<usize>,
    pub head_channels: Vec<usize>,
    pub use_scse: bool,
    pub scse_reduction: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

pub const PRESETS: [&str; 6] = ["nano", "b0", "b1", "b2", "b3", "b4"];

fn mit(dims: [usize; 4], depths: [usize; 4], heads: [usize; 4], sr: [usize; 4]) -> EncoderConfig {
    let stages = (0..4)
        .map(|i| {
            let (k, s) = if i == 0 { (7, 4) } else { (3, 2) };
            StageConfig {
                embed_dim: dims[i],
                depth: depths[i],
                num_heads: heads[i],
                sr_ratio: sr[i],
                patch_kernel: k,
                patch_stride: s,
                patch_pad: k / 2,
            }
        })
        .collect();
    EncoderConfig {
        stages,
        mlp_expansion: 4,
    }
}

impl EncoderConfig {
    pub fn preset(name: &str) -> Result<Self> {
        const WIDE: [usize; 4] = [64, 128, 320, 512];
        const HEADS: [usize; 4] = [1, 2, 5, 8];
        const SR: [usize; 4] = [8, 4, 2, 1];
        Ok(match name {
            "nano" => mit([8, 16, 24, 32], [1, 1, 1, 1], [1, 2, 4, 4], [4, 2, 2, 1]),
            "b0" => mit([32, 64, 160, 256], [2, 2, 2, 2], HEADS, SR),
            "b1" => mit(WIDE, [2, 2, 2, 2], HEADS, SR),
            "b2" => mit(WIDE, [3, 4, 6, 3], HEADS, SR),
            "b3" => mit(WIDE, [3, 4, 18, 3], HEADS, SR),
            "b4" => mit(WIDE, [3, 8, 27, 3], HEADS, SR),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {PRESETS:?}"
                )))
            }
        })
    }

    /// Product of patch strides up to and including `stage`.
    pub fn cumulative_stride(&self, stage: usize) -> usize {
        self.stages[..=stage].iter().map(|s| s.patch_stride).product()
    }

    pub fn total_stride(&self) -> usize {
        self.cumulative_stride(self.stages.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(invalid!("encoder needs exactly 4 stages, got {}", self.stages.len()));
        }
        let strides: Vec<usize> = self.stages.iter().map(|s| s.patch_stride).collect();
        if strides != [4, 2, 2, 2] {
            return Err(invalid!("patch strides must be [4, 2, 2, 2], got {strides:?}"));
        }
        if self.mlp_expansion == 0 {
            return Err(invalid!("mlp_expansion must be positive"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.embed_dim == 0 || s.depth == 0 || s.num_heads == 0 || s.sr_ratio == 0 {
                return Err(invalid!("stage {i}: extents must be positive: {s:?}"));
            }
            if s.embed_dim % s.num_heads != 0 {
                return Err(invalid!(
                    "stage {i}: embed_dim {} not divisible by num_heads {}",
                    s.embed_dim,
                    s.num_heads
                ));
            }
            if s.patch_kernel < s.patch_stride {
                return Err(invalid!("stage {i}: patch kernel smaller than its stride"));
            }
        }
        Ok(())
    }
}

impl DecoderConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (fusion, head, reduction) = match name {
            "nano" => (vec![32, 24, 16], vec![12, 8], 2),
            n if PRESETS.contains(&n) => (vec![256, 128, 64], vec![32, 16], 16),
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        };
        Ok(Self {
            fusion_channels: fusion,
            head_channels: head,
            use_scse: true,
            scse_reduction: reduction,
            num_classes: 2,
        })
    }

    pub fn validate(&self, encoder_stages: usize) -> Result<()> {
        if self.fusion_channels.len() + 1 != encoder_stages {
            return Err(invalid!(
                "decoder needs {} fusion entries for {encoder_stages} encoder stages, got {}",
                encoder_stages - 1,
                self.fusion_channels.len()
            ));
        }
        if self.head_channels.len() != 2 {
            return Err(invalid!(
                "decoder needs 2 head entries (1/4 -> 1/2 -> 1/1), got {}",
                self.head_channels.len()
            ));
        }
        if self.num_classes < 2 {
            return Err(invalid!("num_classes must be >= 2"));
        }
        for &c in self.fusion_channels.iter().chain(&self.head_channels) {
            if c == 0 {
                return Err(invalid!("decoder channel counts must be positive"));
            }
            if self.use_scse && (self.scse_reduction == 0 || c < self.scse_reduction || c % self.scse_reduction != 0) {
                return Err(invalid!(
                    "scSE reduction {} must divide decoder width {c}",
                    self.scse_reduction
                ));
            }
        }
        Ok(())
    }
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        Ok(Self {
            preset: name.to_string(),
            encoder: EncoderConfig::preset(name)?,
            decoder: DecoderConfig::preset(name)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(self.encoder.stages.len())
    }
}
