//! Procedural floor plans with exact wall labels.
//!
//! Plans are drawn the way regional drawings tend to be: solid load-bearing
//! walls, partitions that are only outlined or hatched (so their ink does
//! not cover the labelled region), angled or curved outer corners, door
//! swings, window symbols, furniture outlines, dimension lines and
//! text-like scribbles that must stay out of the label.

mod plan;
pub mod raster;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataprep::io::{save_mask, save_rgb};
use crate::error::{invalid, Error, Result};

pub use plan::{generate_plan, CornerCut, GeneratedPlan, PlanDraw, WallRecord, WallRole, WallStyle};
pub use raster::Rect;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HatchStyle {
    Diagonal,
    Cross,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSpec {
    pub canvas: usize,
    /// Blank border around the building, pixels.
    pub margin: [usize; 2],
    pub rooms: [usize; 2],
    /// Smallest room interior side, pixels.
    pub min_room: usize,
    /// Outer wall thickness range.
    pub thickness: [usize; 2],
    /// Interior wall thickness range; interior walls are drawn thinner.
    pub interior_thickness: [usize; 2],
    /// Chance that an interior wall is a (styled) partition rather than a
    /// solid load-bearing wall.
    pub partition_fraction: f64,
    pub hatch: HatchStyle,
    pub hatch_pitch: usize,
    /// Chance that the outer walls are filled solid rather than styled like
    /// partitions.
    pub solid_fill_fraction: f64,
    pub openings: [usize; 2],
    /// Extra non-wall strokes per plan: furniture, dimension lines, text.
    pub clutter: [usize; 2],
    pub non_manhattan: f64,
    pub arc_segments: usize,
    /// Layouts whose label covers more than this are redrawn.
    pub max_wall_fraction: f64,
}

impl Default for PlanSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl PlanSpec {
    /// 64×64 plans for CPU-scale training.
    pub fn desk() -> Self {
        Self {
            canvas: 64,
            margin: [3, 8],
            rooms: [2, 5],
            min_room: 6,
            thickness: [2, 6],
            interior_thickness: [2, 4],
            partition_fraction: 0.5,
            hatch: HatchStyle::Diagonal,
            hatch_pitch: 3,
            solid_fill_fraction: 0.8,
            openings: [1, 4],
            clutter: [10, 30],
            non_manhattan: 0.3,
            arc_segments: 8,
            max_wall_fraction: 0.25,
        }
    }

    /// The same distribution at 512×512.
    pub fn full() -> Self {
        Self {
            canvas: 512,
            margin: [24, 64],
            rooms: [3, 9],
            min_room: 64,
            thickness: [8, 24],
            interior_thickness: [6, 16],
            hatch_pitch: 6,
            clutter: [40, 120],
            ..Self::desk()
        }
    }

    /// Smallest square plan that can hold `rooms[1]` rooms as a grid.
    fn required_canvas(&self) -> usize {
        let per_side = (self.rooms[1] as f64).sqrt().ceil() as usize;
        2 * self.margin[1] + 2 * self.thickness[1] + per_side * self.min_room + (per_side - 1) * self.interior_thickness[1]
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |n: &str, [a, b]: [usize; 2]| {
            if a > b {
                Err(invalid!("{n} range [{a}, {b}] is not ordered"))
            } else {
                Ok(())
            }
        };
        ordered("margin", self.margin)?;
        ordered("rooms", self.rooms)?;
        ordered("thickness", self.thickness)?;
        ordered("interior_thickness", self.interior_thickness)?;
        ordered("openings", self.openings)?;
        ordered("clutter", self.clutter)?;
        if self.thickness[0].min(self.interior_thickness[0]) < 2 {
            return Err(invalid!("wall thickness must be at least 2 px"));
        }
        if self.rooms[0] == 0 || self.min_room < 3 || self.hatch_pitch < 2 || self.arc_segments == 0 {
            return Err(invalid!("rooms >= 1, min_room >= 3, hatch_pitch >= 2 and arc_segments >= 1 required"));
        }
        for (n, p) in [
            ("partition_fraction", self.partition_fraction),
            ("solid_fill_fraction", self.solid_fill_fraction),
            ("non_manhattan", self.non_manhattan),
            ("max_wall_fraction", self.max_wall_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid!("{n} must lie in [0, 1], got {p}"));
            }
        }
        let need = self.required_canvas();
        if self.canvas < need {
            return Err(invalid!(
                "canvas {} too small for up to {} rooms of {} px (needs {need})",
                self.canvas,
                self.rooms[1],
                self.min_room
            ));
        }
        Ok(())
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub seed: u64,
    pub draw: PlanDraw,
}

/// `n` plans with seeds `seed + i`.
pub fn make_dataset(spec: &PlanSpec, n: usize, seed: u64) -> Result<(Vec<GeneratedPlan>, Vec<ManifestRecord>)> {
    spec.validate()?;
    let mut plans = Vec::with_capacity(n);
    let mut manifest = Vec::with_capacity(n);
    for i in 0..n {
        let s = seed.wrapping_add(i as u64);
        let p = generate_plan(spec, s)?;
        manifest.push(ManifestRecord { index: i, seed: s, draw: p.draw.clone() });
        plans.push(p);
    }
    Ok((plans, manifest))
}

pub fn manifest_jsonl(records: &[ManifestRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("manifest serialises") + "\n").collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1))))
        .collect()
}

pub const SAMPLE_DIRS: [&str; 5] = ["images", "masks", "walls", "doors", "windows"];

/// Layout: `images/` RGB plans, `masks/` exact wall labels, `walls/` the
/// uncarved wall annotation with `doors/` and `windows/` beside it (the
/// input triple for refinement), plus `manifest.jsonl`.
pub fn write_dataset(dir: &Path, plans: &[GeneratedPlan], manifest: &[ManifestRecord]) -> Result<()> {
    for sub in SAMPLE_DIRS {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for (i, p) in plans.iter().enumerate() {
        let name = format!("{i:05}.png");
        save_rgb(dir.join("images").join(&name), &p.sample.image)?;
        save_mask(dir.join("masks").join(&name), &p.sample.mask)?;
        save_mask(dir.join("walls").join(&name), &p.coarse_walls)?;
        save_mask(dir.join("doors").join(&name), &p.doors)?;
        save_mask(dir.join("windows").join(&name), &p.windows)?;
    }
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, manifest_jsonl(manifest)).map_err(|e| Error::io(path, e))
}
