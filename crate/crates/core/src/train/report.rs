use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataprep::image::RgbImage;
use crate::train::ablation::AblationRow;
use crate::train::metrics::MeanMetrics;

/// Full-scale precision/recall per false-positive weight, printed next to
/// desk-scale results for orientation only: (alpha, precision, recall).
pub const REFERENCE_POINTS: [(f64, f64, f64); 4] =
    [(0.6, 94.84, 92.25), (0.7, 95.37, 90.80), (0.8, 97.15, 86.67), (0.9, 97.97, 82.57)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub encoder: String,
    pub loss: String,
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub miou: f64,
}

impl ReportRow {
    pub fn new(model: &str, encoder: &str, loss: &str, m: &MeanMetrics) -> Self {
        Self {
            model: model.into(),
            encoder: encoder.into(),
            loss: loss.into(),
            recall: m.recall,
            precision: m.precision,
            accuracy: m.accuracy,
            miou: m.miou,
        }
    }
}

const HEADERS: [&str; 7] =
    ["Model", "Encoder", "Loss (α / β)", "Recall (%)", "Precision (%)", "Accuracy (%)", "mIoU (%)"];

/// Column-aligned table, best mIoU first. No rows gives the header alone.
pub fn report_table(rows: &[ReportRow]) -> String {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| b.miou.total_cmp(&a.miou));
    let cells: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                r.encoder.clone(),
                r.loss.clone(),
                format!("{:.2}", r.recall),
                format!("{:.2}", r.precision),
                format!("{:.2}", r.accuracy),
                format!("{:.2}", r.miou),
            ]
        })
        .collect();
    let mut width: [usize; 7] = HEADERS.map(|h| h.chars().count());
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |fields: [&str; 7]| {
        let mut s = String::new();
        for (i, f) in fields.iter().enumerate() {
            let pad = width[i] - f.chars().count();
            // text columns left-aligned, numbers right-aligned
            if i < 3 {
                let _ = write!(s, "{f}{}", " ".repeat(pad));
            } else {
                let _ = write!(s, "{}{f}", " ".repeat(pad));
            }
            s.push_str(if i < 6 { " | " } else { "\n" });
        }
        s
    };
    let mut out = line(HEADERS);
    let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&rule.join("-|-"));
    out.push('\n');
    for row in &cells {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3], &row[4], &row[5], &row[6]]));
    }
    out
}

pub const PLOT_SIZE: (usize, usize) = (320, 480);

const PRECISION_COLOR: [u8; 3] = [31, 90, 200];
const RECALL_COLOR: [u8; 3] = [210, 50, 40];
const AXIS_COLOR: [u8; 3] = [40, 40, 40];
const GRID_COLOR: [u8; 3] = [225, 225, 225];

/// 5×7 glyphs, one string per row, '#' set.
fn glyph(c: char) -> Option<[&'static str; 7]> {
    Some(match c {
        '0' => [" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "],
        '1' => ["  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "],
        '2' => [" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"],
        '3' => ["#####", "   # ", "  #  ", "   # ", "    #", "#   #", " ### "],
        '4' => ["   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "],
        '5' => ["#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "],
        '6' => ["  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "],
        '7' => ["#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "],
        '8' => [" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "],
        '9' => [" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "],
        '.' => ["     ", "     ", "     ", "     ", "     ", " ##  ", " ##  "],
        '-' => ["     ", "     ", "     ", "#####", "     ", "     ", "     "],
        '%' => ["##   ", "##  #", "   # ", "  #  ", " #   ", "#  ##", "   ##"],
        'A' => [" ### ", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"],
        'C' => [" ### ", "#   #", "#    ", "#    ", "#    ", "#   #", " ### "],
        'E' => ["#####", "#    ", "#    ", "#### ", "#    ", "#    ", "#####"],
        'H' => ["#   #", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"],
        'I' => [" ### ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "],
        'L' => ["#    ", "#    ", "#    ", "#    ", "#    ", "#    ", "#####"],
        'N' => ["#   #", "##  #", "# # #", "#  ##", "#   #", "#   #", "#   #"],
        'O' => [" ### ", "#   #", "#   #", "#   #", "#   #", "#   #", " ### "],
        'P' => ["#### ", "#   #", "#   #", "#### ", "#    ", "#    ", "#    "],
        'R' => ["#### ", "#   #", "#   #", "#### ", "# #  ", "#  # ", "#   #"],
        'S' => [" ####", "#    ", "#    ", " ### ", "    #", "    #", "#### "],
        ' ' => ["     "; 7],
        _ => return None,
    })
}

fn text(img: &mut RgbImage, y: isize, x: isize, s: &str, color: [u8; 3]) {
    for (k, c) in s.chars().enumerate() {
        let g = glyph(c.to_ascii_uppercase()).unwrap_or(["#####", "#   #", "#   #", "#   #", "#   #", "#   #", "#####"]);
        for (dy, row) in g.iter().enumerate() {
            for (dx, b) in row.bytes().enumerate() {
                if b == b'#' {
                    put(img, y + dy as isize, x + (k * 6 + dx) as isize, color);
                }
            }
        }
    }
}

fn text_width(s: &str) -> isize {
    (s.chars().count() * 6) as isize - 1
}

fn put(img: &mut RgbImage, y: isize, x: isize, c: [u8; 3]) {
    let (h, w) = img.dims();
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        img.put(y as usize, x as usize, c);
    }
}

fn line(img: &mut RgbImage, (y0, x0): (isize, isize), (y1, x1): (isize, isize), c: [u8; 3], thick: isize) {
    let steps = (y1 - y0).abs().max((x1 - x0).abs()).max(1);
    for i in 0..=steps {
        let y = y0 + ((y1 - y0) * i + steps / 2).div_euclid(steps);
        let x = x0 + ((x1 - x0) * i + steps / 2).div_euclid(steps);
        for dy in 0..thick {
            for dx in 0..thick {
                put(img, y + dy - thick / 2, x + dx - thick / 2, c);
            }
        }
    }
}

fn square(img: &mut RgbImage, y: isize, x: isize, r: isize, c: [u8; 3]) {
    for dy in -r..=r {
        for dx in -r..=r {
            put(img, y + dy, x + dx, c);
        }
    }
}

/// Precision and recall (percent) against the false-positive weight, as a
/// fixed-size raster with labelled axes and a legend.
pub fn plot_tradeoff(rows: &[AblationRow]) -> RgbImage {
    let (h, w) = PLOT_SIZE;
    let mut img = RgbImage::filled(h, w, [255; 3]);
    let (left, right, top, bottom) = (52isize, w as isize - 20, 36isize, h as isize - 44);

    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    let (mut a_lo, mut a_hi) = match (rows.first(), rows.last()) {
        (Some(f), Some(l)) => (f.alpha, l.alpha),
        _ => (0.5, 0.9),
    };
    if a_hi - a_lo < 1e-9 {
        a_lo -= 0.05;
        a_hi += 0.05;
    }
    let vals = rows.iter().flat_map(|r| [r.metrics.precision, r.metrics.recall]);
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let (mut v_lo, mut v_hi) = if lo.is_finite() { ((lo - 1.0).floor().max(0.0), (hi + 1.0).ceil().min(100.0)) } else { (0.0, 100.0) };
    if v_hi - v_lo < 4.0 {
        v_hi = (v_lo + 4.0).min(100.0);
        v_lo = v_hi - 4.0;
    }
    let px = |a: f64| left + ((a - a_lo) / (a_hi - a_lo) * (right - left) as f64).round() as isize;
    let py = |v: f64| bottom - ((v - v_lo) / (v_hi - v_lo) * (bottom - top) as f64).round() as isize;

    // grid and y ticks
    for k in 0..=4 {
        let v = v_lo + (v_hi - v_lo) * k as f64 / 4.0;
        let y = py(v);
        line(&mut img, (y, left), (y, right), GRID_COLOR, 1);
        let label = format!("{v:.1}");
        text(&mut img, y - 3, left - 6 - text_width(&label), &label, AXIS_COLOR);
    }
    for r in &rows {
        let x = px(r.alpha);
        line(&mut img, (top, x), (bottom, x), GRID_COLOR, 1);
        let label = format!("{:.2}", r.alpha);
        text(&mut img, bottom + 6, x - text_width(&label) / 2, &label, AXIS_COLOR);
    }
    line(&mut img, (bottom, left), (bottom, right), AXIS_COLOR, 1);
    line(&mut img, (top, left), (bottom, left), AXIS_COLOR, 1);
    let xl = "ALPHA";
    text(&mut img, h as isize - 16, (left + right) / 2 - text_width(xl) / 2, xl, AXIS_COLOR);
    text(&mut img, top - 14, 8, "%", AXIS_COLOR);

    for (series, color) in [(0usize, PRECISION_COLOR), (1, RECALL_COLOR)] {
        let pts: Vec<(isize, isize)> = rows
            .iter()
            .map(|r| (py(if series == 0 { r.metrics.precision } else { r.metrics.recall }), px(r.alpha)))
            .collect();
        for pair in pts.windows(2) {
            line(&mut img, pair[0], pair[1], color, 2);
        }
        for &(y, x) in &pts {
            square(&mut img, y, x, 3, color);
        }
    }

    // legend, top right
    let mut lx = right - text_width("PRECISION") - text_width("RECALL") - 48;
    for (name, color) in [("PRECISION", PRECISION_COLOR), ("RECALL", RECALL_COLOR)] {
        square(&mut img, 14, lx + 3, 3, color);
        text(&mut img, 11, lx + 11, name, AXIS_COLOR);
        lx += text_width(name) + 28;
    }
    img
}
