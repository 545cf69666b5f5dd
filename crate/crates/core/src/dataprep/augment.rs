use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataprep::geometry::{affine, elastic, grid_distort, perspective, AffineParams, CornerJitter};
use crate::dataprep::image::Sample;
use crate::dataprep::photometric::{
    brightness_contrast, clahe, gaussian_noise, iso_noise, normalize_with, IMAGENET_MEAN, IMAGENET_STD,
};
use crate::error::{invalid, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_affine: f64,
    pub scale_range: [f64; 2],
    pub rotate_range: [f64; 2],
    /// Translation bound as a fraction of the side, each axis.
    pub translate_frac: f64,
    pub p_perspective: f64,
    /// Largest corner displacement, as a fraction of the side.
    pub perspective_frac: f64,
    pub p_elastic: f64,
    /// Peak elastic displacement and smoothing, as fractions of the side.
    pub elastic_alpha_frac: f64,
    pub elastic_sigma_frac: f64,
    pub p_grid: f64,
    pub grid_cells: usize,
    pub grid_magnitude: f64,
    pub p_brightness_contrast: f64,
    pub brightness_range: [f64; 2],
    pub contrast_range: [f64; 2],
    pub p_clahe: f64,
    pub clahe_clip: f64,
    pub clahe_tiles: usize,
    /// One draw decides whether noise is added; a second picks gaussian or ISO.
    pub p_noise: f64,
    pub gauss_sigma_range: [f64; 2],
    pub iso_color_range: [f64; 2],
    pub iso_intensity_range: [f64; 2],
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_affine: 0.7,
            scale_range: [0.9, 1.1],
            rotate_range: [-15.0, 15.0],
            translate_frac: 0.1,
            p_perspective: 0.3,
            perspective_frac: 0.05,
            p_elastic: 0.2,
            elastic_alpha_frac: 0.03,
            elastic_sigma_frac: 0.08,
            p_grid: 0.2,
            grid_cells: 5,
            grid_magnitude: 0.3,
            p_brightness_contrast: 0.5,
            brightness_range: [-0.2, 0.2],
            contrast_range: [-0.2, 0.2],
            p_clahe: 0.2,
            clahe_clip: 2.0,
            clahe_tiles: 8,
            p_noise: 0.2,
            gauss_sigma_range: [5.0, 20.0],
            iso_color_range: [0.01, 0.05],
            iso_intensity_range: [0.1, 0.5],
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl AugmentConfig {
    /// Every transform switched off; only normalisation remains.
    pub fn disabled() -> Self {
        Self {
            p_affine: 0.0,
            p_perspective: 0.0,
            p_elastic: 0.0,
            p_grid: 0.0,
            p_brightness_contrast: 0.0,
            p_clahe: 0.0,
            p_noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_affine", self.p_affine),
            ("p_perspective", self.p_perspective),
            ("p_elastic", self.p_elastic),
            ("p_grid", self.p_grid),
            ("p_brightness_contrast", self.p_brightness_contrast),
            ("p_clahe", self.p_clahe),
            ("p_noise", self.p_noise),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid!("{name} must lie in [0, 1], got {p}"));
            }
        }
        let ranges = [
            ("scale_range", self.scale_range),
            ("rotate_range", self.rotate_range),
            ("brightness_range", self.brightness_range),
            ("contrast_range", self.contrast_range),
            ("gauss_sigma_range", self.gauss_sigma_range),
            ("iso_color_range", self.iso_color_range),
            ("iso_intensity_range", self.iso_intensity_range),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(invalid!("{name} must be an ordered finite pair, got [{lo}, {hi}]"));
            }
        }
        if self.scale_range[0] <= 0.0 {
            return Err(invalid!("scale_range must be positive"));
        }
        if self.gauss_sigma_range[0] < 0.0 || self.iso_color_range[0] < 0.0 || self.iso_intensity_range[0] < 0.0 {
            return Err(invalid!("noise strengths must be non-negative"));
        }
        let fracs = [
            self.translate_frac,
            self.perspective_frac,
            self.elastic_alpha_frac,
            self.elastic_sigma_frac,
        ];
        if fracs.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(invalid!("fractional magnitudes must be finite and non-negative"));
        }
        if self.grid_cells == 0 || !(0.0..0.5).contains(&self.grid_magnitude) {
            return Err(invalid!("grid needs cells >= 1 and magnitude in [0, 0.5)"));
        }
        if self.clahe_clip <= 0.0 || self.clahe_tiles == 0 {
            return Err(invalid!("clahe needs a positive clip limit and tile count"));
        }
        if self.std.iter().any(|s| *s <= 0.0) {
            return Err(invalid!("normalisation std must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Noise {
    Gaussian { sigma: f64, seed: u64 },
    Iso { color_shift: f64, intensity: f64, seed: u64 },
}

/// Every random choice of one pipeline run, drawn up front. Applying a plan
/// is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AugmentPlan {
    pub affine: Option<AffineParams>,
    pub perspective: Option<CornerJitter>,
    /// (alpha px, sigma px, field seed)
    pub elastic: Option<(f64, f64, u64)>,
    /// (cells, magnitude, seed)
    pub grid: Option<(usize, f64, u64)>,
    pub brightness_contrast: Option<(f64, f64)>,
    /// (clip limit, tiles)
    pub clahe: Option<(f64, usize)>,
    pub noise: Option<Noise>,
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn coin(rng: &mut impl Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

impl AugmentPlan {
    /// Draw a plan for a `side`-pixel sample. Each group consumes the same
    /// number of draws whether or not it fires, so toggling one probability
    /// never reshuffles the parameters of the others.
    pub fn draw(cfg: &AugmentConfig, side: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let s = side as f64;
        let mut plan = Self::default();

        let fire = coin(&mut rng, cfg.p_affine);
        let t = cfg.translate_frac * s;
        let a = AffineParams {
            scale: uniform(&mut rng, cfg.scale_range),
            angle_deg: uniform(&mut rng, cfg.rotate_range),
            tx: uniform(&mut rng, [-t, t]),
            ty: uniform(&mut rng, [-t, t]),
        };
        plan.affine = fire.then_some(a);

        let fire = coin(&mut rng, cfg.p_perspective);
        let j = cfg.perspective_frac * s;
        let corners: CornerJitter = std::array::from_fn(|_| [uniform(&mut rng, [-j, j]), uniform(&mut rng, [-j, j])]);
        plan.perspective = fire.then_some(corners);

        let fire = coin(&mut rng, cfg.p_elastic);
        let e = (cfg.elastic_alpha_frac * s, cfg.elastic_sigma_frac * s, rng.random());
        plan.elastic = fire.then_some(e);

        let fire = coin(&mut rng, cfg.p_grid);
        let g = (cfg.grid_cells, uniform(&mut rng, [0.0, cfg.grid_magnitude]), rng.random());
        plan.grid = fire.then_some(g);

        let fire = coin(&mut rng, cfg.p_brightness_contrast);
        let bc = (uniform(&mut rng, cfg.brightness_range), uniform(&mut rng, cfg.contrast_range));
        plan.brightness_contrast = fire.then_some(bc);

        let fire = coin(&mut rng, cfg.p_clahe);
        plan.clahe = fire.then_some((cfg.clahe_clip, cfg.clahe_tiles));

        let fire = coin(&mut rng, cfg.p_noise);
        let gaussian = coin(&mut rng, 0.5);
        let sigma = uniform(&mut rng, cfg.gauss_sigma_range);
        let color_shift = uniform(&mut rng, cfg.iso_color_range);
        let intensity = uniform(&mut rng, cfg.iso_intensity_range);
        let noise_seed = rng.random();
        let n = if gaussian {
            Noise::Gaussian { sigma, seed: noise_seed }
        } else {
            Noise::Iso { color_shift, intensity, seed: noise_seed }
        };
        plan.noise = fire.then_some(n);
        plan
    }

    /// Geometric, then photometric, then noise.
    pub fn apply(&self, sample: &Sample) -> Result<Sample> {
        let mut s = sample.clone();
        if let Some(p) = &self.affine {
            s = affine(&s, p)?;
        }
        if let Some(j) = &self.perspective {
            s = perspective(&s, j)?;
        }
        if let Some((alpha, sigma, seed)) = self.elastic {
            s = elastic(&s, alpha, sigma, seed)?;
        }
        if let Some((cells, mag, seed)) = self.grid {
            s = grid_distort(&s, cells, mag, seed)?;
        }
        if let Some((b, c)) = self.brightness_contrast {
            s.image = brightness_contrast(&s.image, b, c)?;
        }
        if let Some((clip, tiles)) = self.clahe {
            s.image = clahe(&s.image, clip, tiles)?;
        }
        match self.noise {
            Some(Noise::Gaussian { sigma, seed }) => s.image = gaussian_noise(&s.image, sigma, seed)?,
            Some(Noise::Iso { color_shift, intensity, seed }) => s.image = iso_noise(&s.image, color_shift, intensity, seed)?,
            None => {}
        }
        Ok(s)
    }
}

/// Draw and apply one augmentation; deterministic in (sample, cfg, seed).
pub fn augment(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> Result<Sample> {
    cfg.validate()?;
    let (h, w) = sample.image.dims();
    AugmentPlan::draw(cfg, h.max(w), seed).apply(sample)
}

/// Normalised image `[3, H, W]` and 0/1 mask `[H, W]`, ready for a batch.
pub fn to_tensors(sample: &Sample, cfg: &AugmentConfig) -> (Tensor<f32>, Tensor<f32>) {
    let img = normalize_with(&sample.image, &cfg.mean, &cfg.std);
    let (h, w) = sample.mask.dims();
    let mask = Tensor::new(&[h, w], sample.mask.bits().iter().map(|&b| b as u8 as f32).collect()).expect("mask shape");
    (img, mask)
}

/// The full per-sample pipeline: augment, then normalise unconditionally.
pub fn augment_pipeline(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    Ok(to_tensors(&augment(sample, cfg, seed)?, cfg))
}
