//! Procedural free-form and box masks.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::MaskGrid;
use crate::error::{invalid, Error};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskKind {
    /// Strokes and rectangles covering 10–30% of the image.
    SmallRandom,
    /// Strokes and rectangles covering 40–70% of the image.
    LargeRandom,
    /// Centered box of ⌊0.8H⌋ × ⌊0.8W⌋ pixels.
    Box80,
    /// Centered box with the given side fraction.
    CustomBox(f64),
}

impl MaskKind {
    /// Masked-area range targeted by the random kinds.
    pub fn target_range(self) -> Option<(f64, f64)> {
        match self {
            MaskKind::SmallRandom => Some((0.10, 0.30)),
            MaskKind::LargeRandom => Some((0.40, 0.70)),
            _ => None,
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskKind::SmallRandom => f.write_str("small-random"),
            MaskKind::LargeRandom => f.write_str("large-random"),
            MaskKind::Box80 => f.write_str("box80"),
            MaskKind::CustomBox(frac) => write!(f, "custom-box:{frac}"),
        }
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "small-random" => Ok(MaskKind::SmallRandom),
            "large-random" => Ok(MaskKind::LargeRandom),
            "box80" => Ok(MaskKind::Box80),
            _ => {
                let frac = s
                    .strip_prefix("custom-box:")
                    .and_then(|f| f.parse::<f64>().ok())
                    .ok_or_else(|| invalid("mask kind", format!("unknown mask kind `{s}`")))?;
                if !(0.0..=1.0).contains(&frac) {
                    return Err(invalid("mask kind", format!("box fraction {frac} outside [0, 1]")));
                }
                Ok(MaskKind::CustomBox(frac))
            }
        }
    }
}

/// Shape parameters for the random kinds, as fractions of the shorter side.
#[derive(Debug, Clone, PartialEq)]
pub struct StrokeParams {
    pub vertices: (usize, usize),
    pub segment: (f64, f64),
    pub radius: (f64, f64),
    pub rect_side: (f64, f64),
    pub rect_probability: f64,
}

impl Default for StrokeParams {
    fn default() -> Self {
        StrokeParams {
            vertices: (4, 10),
            segment: (0.08, 0.25),
            radius: (0.03, 0.08),
            rect_side: (0.12, 0.35),
            rect_probability: 0.3,
        }
    }
}

fn centered_box(h: usize, w: usize, frac: f64) -> MaskGrid {
    let bh = (frac * h as f64).floor() as usize;
    let bw = (frac * w as f64).floor() as usize;
    let (y0, x0) = ((h - bh) / 2, (w - bw) / 2);
    let mut m = MaskGrid::ones(h, w);
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            m.set(y, x, false);
        }
    }
    m
}

fn disc(m: &mut MaskGrid, cy: f64, cx: f64, r: f64) {
    let (h, w) = m.extents();
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as isize).clamp(0, h as isize - 1) as usize;
    let x1 = ((cx + r).ceil() as isize).clamp(0, w as isize - 1) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            if dy * dy + dx * dx <= r * r {
                m.set(y, x, false);
            }
        }
    }
}

fn stroke(m: &mut MaskGrid, p: &StrokeParams, rng: &mut ChaCha8Rng) {
    let (h, w) = m.extents();
    let side = h.min(w) as f64;
    let r = rng.random_range(p.radius.0..=p.radius.1) * side;
    let mut y = rng.random_range(0.0..h as f64);
    let mut x = rng.random_range(0.0..w as f64);
    let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
    let n = rng.random_range(p.vertices.0..=p.vertices.1);
    disc(m, y, x, r);
    for _ in 0..n {
        angle += rng.random_range(-1.2..1.2);
        let len = rng.random_range(p.segment.0..=p.segment.1) * side;
        let (ny, nx) = (
            (y + len * angle.sin()).clamp(0.0, h as f64 - 1.0),
            (x + len * angle.cos()).clamp(0.0, w as f64 - 1.0),
        );
        let steps = len.ceil().max(1.0) as usize;
        for s in 1..=steps {
            let t = s as f64 / steps as f64;
            disc(m, y + t * (ny - y), x + t * (nx - x), r);
        }
        (y, x) = (ny, nx);
    }
}

fn rectangle(m: &mut MaskGrid, p: &StrokeParams, rng: &mut ChaCha8Rng) {
    let (h, w) = m.extents();
    let side = h.min(w) as f64;
    let bh = ((rng.random_range(p.rect_side.0..=p.rect_side.1) * side) as usize).clamp(1, h);
    let bw = ((rng.random_range(p.rect_side.0..=p.rect_side.1) * side) as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - bh);
    let x0 = rng.random_range(0..=w - bw);
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            m.set(y, x, false);
        }
    }
}

pub fn generate_mask(kind: MaskKind, extents: (usize, usize), seed: u64) -> MaskGrid {
    generate_mask_with(kind, extents, seed, &StrokeParams::default())
}

/// Random kinds draw a target masked fraction uniformly from the kind's
/// range, then add strokes and rectangles until it is reached. Shapes that
/// would push coverage past the upper bound are discarded.
pub fn generate_mask_with(kind: MaskKind, (h, w): (usize, usize), seed: u64, params: &StrokeParams) -> MaskGrid {
    let (lo, hi) = match kind {
        MaskKind::Box80 => return centered_box(h, w, 0.8),
        MaskKind::CustomBox(frac) => return centered_box(h, w, frac),
        k => k.target_range().expect("random kinds have a range"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.random_range(lo..hi);
    let mut mask = MaskGrid::ones(h, w);
    for _ in 0..1000 {
        if mask.masked_fraction() >= target {
            break;
        }
        let mut trial = mask.clone();
        if rng.random_bool(params.rect_probability) {
            rectangle(&mut trial, params, &mut rng);
        } else {
            stroke(&mut trial, params, &mut rng);
        }
        if trial.masked_fraction() <= hi {
            mask = trial;
        }
    }
    mask
}
