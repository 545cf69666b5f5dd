use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::raster::{arc, stroke, Geom, Rect};
use super::{HatchStyle, PlanSpec};
use crate::dataprep::image::{RgbImage, Sample};
use crate::dataprep::mask::BinaryMask;
use crate::error::Result;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WallRole {
    Outer,
    LoadBearing,
    Partition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WallStyle {
    Solid,
    /// Outline plus hatch strokes.
    Hatched(HatchStyle),
    /// Outline only.
    Hollow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CornerCut {
    Chamfer { size: f64 },
    Arc { size: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WallRecord {
    pub bbox: Rect,
    pub thickness: usize,
    pub role: WallRole,
    pub style: WallStyle,
}

/// What the generator drew for one plan (one manifest record).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDraw {
    pub rooms: usize,
    pub margin: usize,
    pub outer_thickness: usize,
    pub outer_style: WallStyle,
    pub partitions: usize,
    pub load_bearing: usize,
    pub doors: usize,
    pub windows: usize,
    pub clutter: usize,
    pub corner: Option<CornerCut>,
    pub flip_h: bool,
    pub flip_v: bool,
    pub wall_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPlan {
    /// Rendered drawing and its exact wall label.
    pub sample: Sample,
    /// Walls drawn straight through openings, as a coarse annotation would.
    pub coarse_walls: BinaryMask,
    pub doors: BinaryMask,
    pub windows: BinaryMask,
    pub walls: Vec<WallRecord>,
    pub draw: PlanDraw,
}

struct Shape {
    geom: Geom,
    thickness: usize,
    role: WallRole,
    style: WallStyle,
    bits: Vec<bool>,
}

fn range(rng: &mut impl Rng, [lo, hi]: [usize; 2]) -> usize {
    rng.random_range(lo..=hi)
}

fn styled(hatch: HatchStyle) -> WallStyle {
    match hatch {
        HatchStyle::None => WallStyle::Hollow,
        h => WallStyle::Hatched(h),
    }
}

fn hatch_hit(style: HatchStyle, pitch: usize, y: usize, x: usize) -> bool {
    let p = pitch as isize;
    let (y, x) = (y as isize, x as isize);
    match style {
        HatchStyle::Diagonal => (x + y).rem_euclid(p) == 0,
        HatchStyle::Cross => (x + y).rem_euclid(p) == 0 || (x - y).rem_euclid(p) == 0,
        HatchStyle::None => false,
    }
}

const MAX_LAYOUT_TRIES: usize = 64;

struct Layout {
    margin: usize,
    outer_thickness: usize,
    outer_style: WallStyle,
    corner: Option<CornerCut>,
    interior: Rect,
    shapes: Vec<Shape>,
    rooms: usize,
    partitions: usize,
    load_bearing: usize,
    coarse: Vec<bool>,
    door_bits: Vec<bool>,
    window_bits: Vec<bool>,
    door_marks: Vec<(Rect, bool)>,
    window_marks: Vec<Rect>,
    label: Vec<bool>,
}

impl Layout {
    fn wall_fraction(&self) -> f64 {
        self.label.iter().filter(|&&b| b).count() as f64 / self.label.len() as f64
    }
}

/// Shell, rooms and openings: everything that decides the label.
fn layout(spec: &PlanSpec, rng: &mut impl Rng) -> Layout {
    let side = spec.canvas;
    let n = side * side;
    // ---- outer shell
    let m = range(rng, spec.margin);
    let t = range(rng, spec.thickness);
    let (y0, x0, y1, x1) = (m, m, side - m, side - m);
    let outer_style = if rng.random::<f64>() < spec.solid_fill_fraction { WallStyle::Solid } else { styled(spec.hatch) };
    let interior = Rect::new(y0 + t, x0 + t, y1 - t, x1 - t);
    let cut_draw = rng.random::<f64>() < spec.non_manhattan;
    let cut_size = (rng.random_range(0.25..0.4) * interior.height().min(interior.width()) as f64).round();
    let cut_arc = rng.random::<bool>();
    let corner = cut_draw.then(|| if cut_arc { CornerCut::Arc { size: cut_size } } else { CornerCut::Chamfer { size: cut_size } });
    let c = if corner.is_some() { cut_size as usize + t } else { 0 };

    let mut shapes: Vec<Shape> = Vec::new();
    let mut push = |geom: Geom, thickness, role, style| {
        let bits = geom.rasterize(side);
        shapes.push(Shape { geom, thickness, role, style, bits });
    };
    push(Geom::Rect(Rect::new(y0, x0 + c, y0 + t, x1)), t, WallRole::Outer, outer_style);
    push(Geom::Rect(Rect::new(y1 - t, x0, y1, x1)), t, WallRole::Outer, outer_style);
    push(Geom::Rect(Rect::new(y0 + c, x0, y1, x0 + t)), t, WallRole::Outer, outer_style);
    push(Geom::Rect(Rect::new(y0, x1 - t, y1, x1)), t, WallRole::Outer, outer_style);
    let half = t as f64 / 2.0;
    let (fx0, fy0, cf) = (x0 as f64, y0 as f64, c as f64);
    if let Some(cut) = corner {
        let pts = match cut {
            CornerCut::Chamfer { .. } => vec![(fx0 + cf, fy0 + half), (fx0 + half, fy0 + cf)],
            CornerCut::Arc { .. } => arc((fx0 + cf, fy0 + cf), cf - half, -PI / 2.0, -PI, spec.arc_segments),
        };
        push(Geom::Polyline { points: pts, half }, t, WallRole::Outer, outer_style);
    }
    // Anything past the corner's centre line is outside the building.
    let cut_away = |y: usize, x: usize| -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match corner {
            None => false,
            Some(CornerCut::Chamfer { .. }) => (px - fx0) + (py - fy0) < cf + half,
            Some(CornerCut::Arc { .. }) => {
                px < fx0 + cf && py < fy0 + cf && ((px - fx0 - cf).powi(2) + (py - fy0 - cf).powi(2)).sqrt() > cf - half
            }
        }
    };

    // ---- rooms by repeated splitting of the largest splittable room
    let target = range(rng, spec.rooms);
    let mut rooms = vec![interior];
    let (mut partitions, mut load_bearing) = (0, 0);
    while rooms.len() < target {
        let tp = range(rng, spec.interior_thickness);
        let fits = |r: &Rect| r.height().max(r.width()) >= 2 * spec.min_room + tp;
        let Some(i) = (0..rooms.len()).filter(|&i| fits(&rooms[i])).max_by_key(|&i| (rooms[i].area(), usize::MAX - i)) else {
            break;
        };
        let r = rooms.swap_remove(i);
        let len = r.height().max(r.width());
        let at = rng.random_range(spec.min_room..=len - spec.min_room - tp);
        let (wall, a, b) = if r.width() >= r.height() {
            let x = r.x0 + at;
            (Rect::new(r.y0, x, r.y1, x + tp), Rect::new(r.y0, r.x0, r.y1, x), Rect::new(r.y0, x + tp, r.y1, r.x1))
        } else {
            let y = r.y0 + at;
            (Rect::new(y, r.x0, y + tp, r.x1), Rect::new(r.y0, r.x0, y, r.x1), Rect::new(y + tp, r.x0, r.y1, r.x1))
        };
        rooms.push(a);
        rooms.push(b);
        let (role, style) = if rng.random::<f64>() < spec.partition_fraction {
            partitions += 1;
            (WallRole::Partition, styled(spec.hatch))
        } else {
            load_bearing += 1;
            (WallRole::LoadBearing, WallStyle::Solid)
        };
        let mut bits = Geom::Rect(wall).rasterize(side);
        for (j, b) in bits.iter_mut().enumerate() {
            *b &= !cut_away(j / side, j % side);
        }
        shapes.push(Shape { geom: Geom::Rect(wall), thickness: tp, role, style, bits });
    }

    let mut coarse = vec![false; n];
    for s in &shapes {
        for (c, b) in coarse.iter_mut().zip(&s.bits) {
            *c |= b;
        }
    }

    // ---- openings: gaps across straight walls, clear of junctions
    let t_max = shapes.iter().map(|s| s.thickness).max().unwrap_or(t);
    let candidates: Vec<usize> = (0..shapes.len())
        .filter(|&i| match &shapes[i].geom {
            Geom::Rect(r) => r.height().max(r.width()) >= 2 * t_max + 6,
            Geom::Polyline { .. } => false,
        })
        .collect();
    let mut door_bits = vec![false; n];
    let mut window_bits = vec![false; n];
    let mut door_marks = Vec::new();
    let mut window_marks = Vec::new();
    let want = range(rng, spec.openings);
    for _ in 0..if candidates.is_empty() { 0 } else { want } {
        let si = candidates[rng.random_range(0..candidates.len())];
        let Geom::Rect(r) = shapes[si].geom else { unreachable!() };
        let horizontal = r.horizontal();
        let (start, len) = if horizontal { (r.x0, r.width()) } else { (r.y0, r.height()) };
        // stay clear of the joints at both ends
        let lo = t_max + 1;
        let max_w = (len / 2).min(len - 2 * lo - 1).max(3);
        let gw = rng.random_range(3..=max_w);
        let off = rng.random_range(lo..=len - lo - gw);
        let gap = if horizontal {
            Rect::new(r.y0, start + off, r.y1, start + off + gw)
        } else {
            Rect::new(start + off, r.x0, start + off + gw, r.x1)
        };
        let window = shapes[si].role == WallRole::Outer && rng.random::<bool>();
        let swing_side = rng.random::<bool>();
        let target = if window { &mut window_bits } else { &mut door_bits };
        for y in gap.y0..gap.y1 {
            for x in gap.x0..gap.x1 {
                target[y * side + x] = true;
            }
        }
        if window {
            window_marks.push(gap);
        } else {
            door_marks.push((gap, swing_side));
        }
    }
    let mut label = coarse.clone();
    for i in 0..n {
        if door_bits[i] || window_bits[i] {
            label[i] = false;
        }
    }
    Layout {
        margin: m,
        outer_thickness: t,
        outer_style,
        corner,
        interior,
        shapes,
        rooms: rooms.len(),
        partitions,
        load_bearing,
        coarse,
        door_bits,
        window_bits,
        door_marks,
        window_marks,
        label,
    }
}

/// Render one plan. Layout and clutter draw from separate streams, so the
/// label is independent of how much clutter is drawn. Layouts denser than
/// `max_wall_fraction` are redrawn from the same stream (bounded retries).
pub fn generate_plan(spec: &PlanSpec, seed: u64) -> Result<GeneratedPlan> {
    spec.validate()?;
    let mut rng = seed::rng(seed::derive(seed, 0));
    let mut clutter_rng = seed::rng(seed::derive(seed, 1));
    let side = spec.canvas;
    let n = side * side;
    let mut lay = layout(spec, &mut rng);
    for _ in 0..MAX_LAYOUT_TRIES {
        if lay.wall_fraction() <= spec.max_wall_fraction {
            break;
        }
        lay = layout(spec, &mut rng);
    }
    let Layout {
        margin: m,
        outer_thickness: t,
        outer_style,
        corner,
        interior,
        shapes,
        rooms,
        partitions,
        load_bearing,
        coarse,
        door_bits,
        window_bits,
        door_marks,
        window_marks,
        label,
    } = lay;

    // ---- ink
    let wall_ink: u8 = rng.random_range(0..=40);
    let mut gray = vec![255u8; n];
    for s in &shapes {
        let inside = |y: isize, x: isize| -> bool {
            y >= 0 && x >= 0 && (y as usize) < side && (x as usize) < side && {
                let j = y as usize * side + x as usize;
                s.bits[j] && label[j]
            }
        };
        for y in 0..side {
            for x in 0..side {
                if !inside(y as isize, x as isize) {
                    continue;
                }
                let (yi, xi) = (y as isize, x as isize);
                let edge = !(inside(yi - 1, xi) && inside(yi + 1, xi) && inside(yi, xi - 1) && inside(yi, xi + 1));
                let ink = match s.style {
                    WallStyle::Solid => true,
                    WallStyle::Hollow => edge,
                    WallStyle::Hatched(h) => edge || hatch_hit(h, spec.hatch_pitch, y, x),
                };
                if ink {
                    gray[y * side + x] = wall_ink;
                }
            }
        }
    }

    // ---- symbols and clutter (never part of the label)
    let symbol_ink = wall_ink.saturating_add(40);
    for g in &window_marks {
        let (a, b) = if g.horizontal() { (g.y0, g.y1 - 1) } else { (g.x0, g.x1 - 1) };
        for line in [a, b, (a + b) / 2] {
            if g.horizontal() {
                stroke(&mut gray, side, (g.x0 as f64, line as f64), ((g.x1 - 1) as f64, line as f64), symbol_ink);
            } else {
                stroke(&mut gray, side, (line as f64, g.y0 as f64), (line as f64, (g.y1 - 1) as f64), symbol_ink);
            }
        }
    }
    for (g, side_flag) in &door_marks {
        let (len, sign) = (g.width().max(g.height()) as f64, if *side_flag { 1.0 } else { -1.0 });
        let (hinge, leaf_tip, far) = if g.horizontal() {
            let y = if *side_flag { g.y1 as f64 } else { g.y0 as f64 - 1.0 };
            ((g.x0 as f64, y), (g.x0 as f64, y + sign * len), (g.x1 as f64 - 1.0, y))
        } else {
            let x = if *side_flag { g.x1 as f64 } else { g.x0 as f64 - 1.0 };
            ((x, g.y0 as f64), (x + sign * len, g.y0 as f64), (x, g.y1 as f64 - 1.0))
        };
        stroke(&mut gray, side, hinge, leaf_tip, symbol_ink);
        let a0 = (leaf_tip.1 - hinge.1).atan2(leaf_tip.0 - hinge.0);
        let a1 = (far.1 - hinge.1).atan2(far.0 - hinge.0);
        let mut a1 = a1;
        if (a1 - a0).abs() > PI {
            a1 += if a1 < a0 { 2.0 * PI } else { -2.0 * PI };
        }
        for w in arc(hinge, len, a0, a1, 8).windows(2) {
            stroke(&mut gray, side, w[0], w[1], symbol_ink);
        }
    }
    let strokes = range(&mut clutter_rng, spec.clutter);
    draw_clutter(&mut gray, side, strokes, interior, &mut clutter_rng);

    // ---- random mirror so every corner can be the cut one
    let (flip_h, flip_v) = (rng.random::<bool>(), rng.random::<bool>());
    let flip = |v: &[bool]| -> Vec<bool> {
        (0..n)
            .map(|i| {
                let (y, x) = (i / side, i % side);
                let (sy, sx) = (if flip_v { side - 1 - y } else { y }, if flip_h { side - 1 - x } else { x });
                v[sy * side + sx]
            })
            .collect()
    };
    let gray: Vec<u8> = (0..n)
        .map(|i| {
            let (y, x) = (i / side, i % side);
            gray[(if flip_v { side - 1 - y } else { y }) * side + if flip_h { side - 1 - x } else { x }]
        })
        .collect();
    let flip_rect = |r: Rect| -> Rect {
        let (y0, y1) = if flip_v { (side - r.y1, side - r.y0) } else { (r.y0, r.y1) };
        let (x0, x1) = if flip_h { (side - r.x1, side - r.x0) } else { (r.x0, r.x1) };
        Rect::new(y0, x0, y1, x1)
    };

    let mask = BinaryMask::new(side, side, flip(&label))?;
    let walls = shapes
        .iter()
        .map(|s| WallRecord { bbox: flip_rect(s.geom.bbox(side)), thickness: s.thickness, role: s.role, style: s.style })
        .collect();
    let draw = PlanDraw {
        rooms,
        margin: m,
        outer_thickness: t,
        outer_style,
        partitions,
        load_bearing,
        doors: door_marks.len(),
        windows: window_marks.len(),
        clutter: strokes,
        corner,
        flip_h,
        flip_v,
        wall_fraction: mask.fraction(),
    };
    Ok(GeneratedPlan {
        sample: Sample::new(RgbImage::from_gray(side, side, &gray)?, mask)?,
        coarse_walls: BinaryMask::new(side, side, flip(&coarse))?,
        doors: BinaryMask::new(side, side, flip(&door_bits))?,
        windows: BinaryMask::new(side, side, flip(&window_bits))?,
        walls,
        draw,
    })
}

/// Furniture outlines, dimension lines with ticks, and glyph-like
/// scribbles. Sizes scale with the canvas.
fn draw_clutter(gray: &mut [u8], side: usize, count: usize, room: Rect, rng: &mut impl Rng) {
    let k = side as f64 / 64.0;
    let pt = |rng: &mut dyn rand::RngCore, r: &Rect| -> (f64, f64) {
        (rng.random_range(r.x0 as f64..r.x1.max(r.x0 + 1) as f64), rng.random_range(r.y0 as f64..r.y1.max(r.y0 + 1) as f64))
    };
    let whole = Rect::new(0, 0, side, side);
    for _ in 0..count {
        let ink: u8 = rng.random_range(60..=150);
        match rng.random_range(0..3) {
            0 => {
                let (x, y) = pt(rng, &room);
                let (w, h) = (rng.random_range(3.0..12.0) * k, rng.random_range(3.0..12.0) * k);
                let c = [(x, y), (x + w, y), (x + w, y + h), (x, y + h), (x, y)];
                for s in c.windows(2) {
                    stroke(gray, side, s[0], s[1], ink);
                }
            }
            1 => {
                let (x, y) = pt(rng, &whole);
                let len = rng.random_range(10.0..30.0) * k;
                let tick = 1.5 * k;
                if rng.random::<bool>() {
                    stroke(gray, side, (x, y), (x + len, y), ink);
                    stroke(gray, side, (x, y - tick), (x, y + tick), ink);
                    stroke(gray, side, (x + len, y - tick), (x + len, y + tick), ink);
                } else {
                    stroke(gray, side, (x, y), (x, y + len), ink);
                    stroke(gray, side, (x - tick, y), (x + tick, y), ink);
                    stroke(gray, side, (x - tick, y + len), (x + tick, y + len), ink);
                }
            }
            _ => {
                // a short run of 3×5 seven-segment-ish glyphs
                let (mut x, y) = pt(rng, &room);
                let (gw, gh) = (2.0 * k, 4.0 * k);
                for _ in 0..rng.random_range(2..=4) {
                    let segs = [
                        ((0.0, 0.0), (gw, 0.0)),
                        ((0.0, gh / 2.0), (gw, gh / 2.0)),
                        ((0.0, gh), (gw, gh)),
                        ((0.0, 0.0), (0.0, gh)),
                        ((gw, 0.0), (gw, gh)),
                        ((0.0, 0.0), (gw, gh)),
                    ];
                    for (a, b) in segs {
                        if rng.random::<f64>() < 0.45 {
                            stroke(gray, side, (x + a.0, y + a.1), (x + b.0, y + b.1), ink);
                        }
                    }
                    x += gw + 1.5 * k;
                }
            }
        }
    }
}
