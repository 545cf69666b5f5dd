//! MitUNet: Mix-Transformer encoder + U-Net decoder with scSE.

pub mod checkpoint;
pub mod config;
mod decoder;
mod encoder;
mod layers;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{DecoderConfig, EncoderConfig, ModelConfig, StageConfig, PRESETS};
pub use decoder::{scse, ScseWeights};
pub use encoder::{
    efficient_self_attention, grid_to_tokens, mix_ffn, overlap_patch_embed, tokens_to_grid, AttentionWeights,
    FfnWeights, PatchEmbedWeights, ReductionWeights,
};
pub use layers::BnBatchStats;
pub use params::ParamStore;

use self::decoder::Decoder;
use self::encoder::Encoder;
use self::layers::Ctx;
use self::params::Builder;
use crate::error::{shape_err, Result};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;

/// Everything one forward pass leaves on the graph.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub logits: NodeId,
    /// Encoder features, strides 4, 8, 16, 32.
    pub features: Vec<NodeId>,
    /// Graph nodes of the parameters, aligned with [`ParamStore::tensors`].
    pub params: Vec<NodeId>,
    /// Batch statistics, one entry per batch-norm layer (training mode only).
    pub bn_stats: Vec<BnBatchStats<T>>,
}

#[derive(Debug, Clone)]
pub struct MitUNet<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: Encoder,
    decoder: Decoder,
}

impl<T: Scalar> MitUNet<T> {
    /// Randomly initialized model; the seed fixes every initial value.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bd = Builder::<T, _>::new(&mut rng);
        let encoder = Encoder::new(&mut bd, &config.encoder)?;
        let widths: Vec<usize> = config.encoder.stages.iter().map(|s| s.embed_dim).collect();
        let decoder = Decoder::new(&mut bd, &config.decoder, &widths)?;
        Ok(Self {
            params: bd.store,
            config,
            encoder,
            decoder,
        })
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        Self::new(ModelConfig::preset(name)?, seed)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same architecture, values converted to another precision.
    pub fn cast<U: Scalar>(&self) -> MitUNet<U> {
        MitUNet {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// Input sides must be multiples of the encoder's total stride.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.encoder.total_stride();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(shape_err!("model input must be [N, 3, H, W], got {shape:?}"));
        }
        if shape[2] % m != 0 || shape[3] % m != 0 {
            return Err(shape_err!(
                "input {}x{} must be a multiple of {m} on both sides",
                shape[2],
                shape[3]
            ));
        }
        Ok(())
    }

    /// Records the forward pass of `image` (`[N, 3, H, W]`) on `g`. In
    /// training mode batch-norm layers use batch statistics and report them.
    pub fn forward(&self, g: &mut Graph<T>, image: NodeId, train: bool) -> Result<Forward<T>> {
        self.check_input(g.shape(image))?;
        let cx = Ctx::bind(g, &self.params, train);
        self.run(cx, image)
    }

    /// Like [`MitUNet::forward`], but reads parameters from existing graph
    /// nodes (one per entry of [`ParamStore::tensors`], same shapes).
    pub fn forward_with(&self, g: &mut Graph<T>, image: NodeId, params: &[NodeId], train: bool) -> Result<Forward<T>> {
        self.check_input(g.shape(image))?;
        if params.len() != self.params.len() {
            return Err(shape_err!("expected {} parameter nodes, got {}", self.params.len(), params.len()));
        }
        for ((&id, t), name) in params.iter().zip(self.params.tensors()).zip(self.params.names()) {
            if g.shape(id) != t.shape() {
                return Err(shape_err!("parameter {name}: node shape {:?} vs {:?}", g.shape(id), t.shape()));
            }
        }
        let cx = Ctx::with_ids(g, &self.params, params.to_vec(), train);
        self.run(cx, image)
    }

    fn run(&self, mut cx: Ctx<T>, image: NodeId) -> Result<Forward<T>> {
        let features = self.encoder.forward(&mut cx, image)?;
        let logits = self.decoder.forward(&mut cx, &features)?;
        Ok(Forward {
            logits,
            features,
            params: cx.ids,
            bn_stats: cx.bn_stats,
        })
    }

    /// Logits for an input tensor, evaluation mode.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let f = self.forward(&mut g, x, false)?;
        Ok(g.value(f.logits).clone())
    }

    /// Exponential moving update of the running statistics.
    pub fn update_running_stats(&mut self, stats: &[BnBatchStats<T>], momentum: f64) {
        let m = T::of(momentum);
        let keep = T::one() - m;
        let bufs = self.params.buffers_mut();
        for s in stats {
            for (r, &b) in bufs[s.mean_buffer].data_mut().iter_mut().zip(&s.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in bufs[s.var_buffer].data_mut().iter_mut().zip(&s.var) {
                *r = keep * *r + m * b;
            }
        }
    }
}

/// Finite-difference check of the full model: the mean of the logits
/// weighted by a fixed random tensor, differentiated with respect to
/// `coords` randomly chosen parameter entries. Runs in 64-bit with a 1e-6
/// step, small enough that ReLU kinks are rarely crossed.
pub fn model_grad_check(
    preset: &str,
    side: usize,
    coords: usize,
    tolerance: f64,
    seed: u64,
) -> Result<crate::tensor::gradcheck::GradCheckReport> {
    use crate::tensor::gradcheck::{analytic_gradient, numeric_gradient, relative_error, GradCheckReport};
    use crate::tensor::Precision;
    use rand::Rng;

    let m = MitUNet::<f64>::preset(preset, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, 1));
    let image = Tensor::<f64>::uniform(&[1, 3, side, side], -1.0, 1.0, &mut rng)?;
    let weights = Tensor::<f64>::uniform(&[1, 2, side, side], -1.0, 1.0, &mut rng)?;
    m.check_input(image.shape())?;
    let build = |g: &mut Graph<f64>, ids: &[NodeId]| {
        let x = g.constant(image.clone());
        let f = m.forward_with(g, x, ids, true)?;
        let w = g.constant(weights.clone());
        let p = g.mul(f.logits, w)?;
        Ok(g.mean(p))
    };
    let inputs = m.params().tensors().to_vec();
    let analytic = analytic_gradient(&build, &inputs)?;
    let picks: Vec<(usize, usize)> = (0..coords)
        .map(|_| {
            let i = rng.random_range(0..inputs.len());
            (i, rng.random_range(0..inputs[i].numel()))
        })
        .collect();
    let numeric = numeric_gradient(&build, &inputs, &picks, 1e-8)?;
    let max_rel_err = picks
        .iter()
        .zip(&numeric)
        .map(|(&(i, j), &n)| relative_error(analytic[i].data()[j], n))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        op: format!("model:{preset}"),
        precision: Precision::F64,
        seed,
        coords_checked: picks.len(),
        max_rel_err,
        tolerance,
        pass: max_rel_err <= tolerance,
    })
}
