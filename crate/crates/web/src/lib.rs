//! Browser demo bindings. Every export works on plain Rust values too, so the
//! same code is exercised natively by the tests.

use mitunet_core::dataprep::{augment, refine_annotation, AugmentConfig, BinaryMask, RgbImage, Sample};
use mitunet_core::synthgen::{generate_plan, GeneratedPlan, PlanSpec};
use wasm_bindgen::prelude::*;

fn rgba(img: &RgbImage) -> Vec<u8> {
    img.data().chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// Walls black on white.
fn mask_rgba(m: &BinaryMask) -> Vec<u8> {
    m.bits().iter().flat_map(|&b| if b { [0, 0, 0, 255] } else { [255; 4] }).collect()
}

fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let inter = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count();
    let union = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[wasm_bindgen]
pub struct Demo {
    plan: GeneratedPlan,
    augmented: Option<Sample>,
}

#[wasm_bindgen]
impl Demo {
    /// `size` is "desk" (64 px) or "full" (512 px).
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: &str) -> Result<Demo, String> {
        let spec = match size {
            "desk" => PlanSpec::desk(),
            "full" => PlanSpec::full(),
            other => return Err(format!("unknown size {other:?}; use \"desk\" or \"full\"")),
        };
        let plan = generate_plan(&spec, seed as u64).map_err(|e| e.to_string())?;
        Ok(Demo { plan, augmented: None })
    }

    pub fn side(&self) -> u32 {
        self.plan.sample.mask.height() as u32
    }

    pub fn wall_fraction(&self) -> f64 {
        self.plan.sample.mask.fraction()
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        rgba(&self.plan.sample.image)
    }

    pub fn label_rgba(&self) -> Vec<u8> {
        mask_rgba(&self.plan.sample.mask)
    }

    /// The coarse annotation: walls drawn through openings (grey), with door
    /// and window footprints highlighted.
    pub fn coarse_rgba(&self) -> Vec<u8> {
        let p = &self.plan;
        (0..p.coarse_walls.bits().len())
            .flat_map(|i| {
                let (y, x) = (i / p.coarse_walls.width(), i % p.coarse_walls.width());
                if p.doors.get(y, x) {
                    [220, 120, 20, 255]
                } else if p.windows.get(y, x) {
                    [30, 140, 220, 255]
                } else if p.coarse_walls.get(y, x) {
                    [90, 90, 90, 255]
                } else {
                    [255; 4]
                }
            })
            .collect()
    }

    /// Refined annotation as RGBA: agreement with the exact label in black,
    /// extra wall in red, missed wall in blue.
    pub fn refine_rgba(&self, dilate: u32, close: u32) -> Result<Vec<u8>, String> {
        let r = self.refined(dilate, close)?;
        let label = &self.plan.sample.mask;
        Ok(r.bits()
            .iter()
            .zip(label.bits())
            .flat_map(|(&got, &want)| match (got, want) {
                (true, true) => [0, 0, 0, 255],
                (true, false) => [220, 40, 40, 255],
                (false, true) => [40, 90, 230, 255],
                (false, false) => [255; 4],
            })
            .collect())
    }

    /// IoU of the refined coarse annotation against the exact label.
    pub fn refine_iou(&self, dilate: u32, close: u32) -> Result<f64, String> {
        Ok(iou(&self.refined(dilate, close)?, &self.plan.sample.mask))
    }

    /// IoU of the unrefined coarse annotation against the exact label.
    pub fn coarse_iou(&self) -> f64 {
        iou(&self.plan.coarse_walls, &self.plan.sample.mask)
    }

    /// Runs the training augmentation with every group forced on or at its
    /// configured probability.
    pub fn augment(&mut self, seed: u32, force_all: bool) -> Result<(), String> {
        let mut cfg = AugmentConfig::default();
        if force_all {
            cfg.p_affine = 1.0;
            cfg.p_perspective = 1.0;
            cfg.p_elastic = 1.0;
            cfg.p_grid = 1.0;
            cfg.p_brightness_contrast = 1.0;
            cfg.p_clahe = 1.0;
            cfg.p_noise = 1.0;
        }
        self.augmented = Some(augment(&self.plan.sample, &cfg, seed as u64).map_err(|e| e.to_string())?);
        Ok(())
    }

    pub fn augmented_image_rgba(&self) -> Option<Vec<u8>> {
        self.augmented.as_ref().map(|s| rgba(&s.image))
    }

    pub fn augmented_label_rgba(&self) -> Option<Vec<u8>> {
        self.augmented.as_ref().map(|s| mask_rgba(&s.mask))
    }
}

impl Demo {
    fn refined(&self, dilate: u32, close: u32) -> Result<BinaryMask, String> {
        if close % 2 == 0 {
            return Err(format!("closing kernel must be odd, got {close}"));
        }
        let p = &self.plan;
        refine_annotation(&p.coarse_walls, &p.doors, &p.windows, dilate as usize, close as usize).map_err(|e| e.to_string())
    }

    pub fn plan(&self) -> &GeneratedPlan {
        &self.plan
    }

    pub fn augmented(&self) -> Option<&Sample> {
        self.augmented.as_ref()
    }
}
