//! Pixel-set geometry for the generator. Every wall is a set of pixels; the
//! ground truth is their union, so the label is exact by construction.

/// Half-open integer rectangle `[y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn new(y0: usize, x0: usize, y1: usize, x1: usize) -> Self {
        Self { y0, x0, y1, x1 }
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }

    /// True when the rectangle runs left-right.
    pub fn horizontal(&self) -> bool {
        self.width() >= self.height()
    }
}

/// Pixel-centre distance from `(px, py)` to the segment `a`–`b`.
fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Geom {
    Rect(Rect),
    /// Chain of capsules through `points` (x, y), `half` pixels either side.
    Polyline { points: Vec<(f64, f64)>, half: f64 },
}

impl Geom {
    /// Membership bitmap over a `side`×`side` canvas.
    pub fn rasterize(&self, side: usize) -> Vec<bool> {
        let mut out = vec![false; side * side];
        match self {
            Geom::Rect(r) => {
                for y in r.y0..r.y1.min(side) {
                    for x in r.x0..r.x1.min(side) {
                        out[y * side + x] = true;
                    }
                }
            }
            Geom::Polyline { points, half } => {
                for y in 0..side {
                    for x in 0..side {
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        out[y * side + x] = points.windows(2).any(|s| segment_distance(px, py, s[0], s[1]) <= *half);
                    }
                }
            }
        }
        out
    }

    pub fn bbox(&self, side: usize) -> Rect {
        match self {
            Geom::Rect(r) => *r,
            Geom::Polyline { .. } => {
                let bits = self.rasterize(side);
                let mut b = Rect::new(side, side, 0, 0);
                for (i, _) in bits.iter().enumerate().filter(|(_, &v)| v) {
                    let (y, x) = (i / side, i % side);
                    b.y0 = b.y0.min(y);
                    b.x0 = b.x0.min(x);
                    b.y1 = b.y1.max(y + 1);
                    b.x1 = b.x1.max(x + 1);
                }
                b
            }
        }
    }
}

/// One-pixel stroke by dense sampling; off-canvas points are dropped.
pub fn stroke(canvas: &mut [u8], side: usize, a: (f64, f64), b: (f64, f64), ink: u8) {
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    let steps = (len * 2.0).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        if x >= 0.0 && y >= 0.0 && (x as usize) < side && (y as usize) < side {
            let idx = y as usize * side + x as usize;
            canvas[idx] = canvas[idx].min(ink);
        }
    }
}

/// Points of a circular arc centred at `c`, `segments` chords long.
pub fn arc(c: (f64, f64), r: f64, from: f64, to: f64, segments: usize) -> Vec<(f64, f64)> {
    (0..=segments)
        .map(|i| {
            let a = from + (to - from) * i as f64 / segments as f64;
            (c.0 + r * a.cos(), c.1 + r * a.sin())
        })
        .collect()
}
