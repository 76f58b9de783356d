//! Procedural image corpora standing in for natural-image datasets.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, with_path, Error, Result};
use crate::image::Image;
use crate::seed::derive;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ImageClass {
    Gradient,
    Shapes,
    Texture,
}

impl ImageClass {
    pub const ALL: [ImageClass; 3] = [ImageClass::Gradient, ImageClass::Shapes, ImageClass::Texture];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Gradients,
    Shapes,
    Textures,
    Mixed,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Gradients => "gradients",
            DatasetKind::Shapes => "shapes",
            DatasetKind::Textures => "textures",
            DatasetKind::Mixed => "mixed",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(DatasetKind::Gradients),
            "shapes" => Ok(DatasetKind::Shapes),
            "textures" => Ok(DatasetKind::Textures),
            "mixed" => Ok(DatasetKind::Mixed),
            _ => Err(invalid("dataset kind", format!("unknown kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub class: ImageClass,
    pub image: Image,
}

type Rgb = [f64; 3];

fn color(rng: &mut impl Rng) -> Rgb {
    [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)]
}

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn to_bytes(pixels: &[Rgb]) -> Vec<u8> {
    pixels.iter().flat_map(|p| p.map(|v| v.round().clamp(0.0, 255.0) as u8)).collect()
}

fn gradient(n: usize, rng: &mut impl Rng) -> Vec<Rgb> {
    let (a, b) = (color(rng), color(rng));
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let half = n as f64 / 2.0;
    // projection range of the square onto the direction
    let reach = half * (dx.abs() + dy.abs());
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let p = (x as f64 + 0.5 - half) * dx + (y as f64 + 0.5 - half) * dy;
            out.push(lerp(a, b, (p / reach + 1.0) / 2.0));
        }
    }
    out
}

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }
}

/// Flat-filled ellipses and rectangles over a flat background, 4×4
/// supersampled for anti-aliased edges.
fn shapes(n: usize, rng: &mut impl Rng) -> Vec<Rgb> {
    let mut out = vec![color(rng); n * n];
    let s = n as f64;
    for _ in 0..rng.random_range(1..=4) {
        let fill = color(rng);
        let shape = if rng.random_bool(0.5) {
            Shape::Ellipse {
                cx: rng.random_range(0.1..0.9) * s,
                cy: rng.random_range(0.1..0.9) * s,
                rx: rng.random_range(0.1..0.35) * s,
                ry: rng.random_range(0.1..0.35) * s,
            }
        } else {
            let (w, h) = (rng.random_range(0.15..0.6) * s, rng.random_range(0.15..0.6) * s);
            let (x0, y0) = (rng.random_range(0.0..s - w), rng.random_range(0.0..s - h));
            Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }
        };
        for y in 0..n {
            for x in 0..n {
                let mut hits = 0;
                for sy in 0..4 {
                    for sx in 0..4 {
                        let (px, py) = (x as f64 + (sx as f64 + 0.5) / 4.0, y as f64 + (sy as f64 + 0.5) / 4.0);
                        hits += shape.contains(px, py) as u32;
                    }
                }
                if hits > 0 {
                    let p = &mut out[y * n + x];
                    *p = lerp(*p, fill, hits as f64 / 16.0);
                }
            }
        }
    }
    out
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Two-octave value noise mapped onto a two-colour ramp.
fn texture(n: usize, rng: &mut impl Rng) -> Vec<Rgb> {
    let (a, b) = (color(rng), color(rng));
    let base = rng.random_range(3..=6usize);
    let octaves = [(base, 0.7), (2 * base, 0.3)];
    let mut field = vec![0.0f64; n * n];
    for (cells, weight) in octaves {
        let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random_range(0.0..1.0)).collect();
        let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
        for y in 0..n {
            for x in 0..n {
                let fy = (y as f64 + 0.5) / n as f64 * cells as f64;
                let fx = (x as f64 + 0.5) / n as f64 * cells as f64;
                let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
                let (ty, tx) = (smooth(fy - iy as f64), smooth(fx - ix as f64));
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                field[y * n + x] += weight * (top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    field.iter().map(|&t| lerp(a, b, t)).collect()
}

pub fn render(class: ImageClass, extent: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = match class {
        ImageClass::Gradient => gradient(extent, &mut rng),
        ImageClass::Shapes => shapes(extent, &mut rng),
        ImageClass::Texture => texture(extent, &mut rng),
    };
    Image::from_rgb_bytes(extent, extent, &to_bytes(&pixels)).expect("square RGB raster")
}

/// Deterministic corpus of `count` square images. A mixed corpus assigns
/// classes in equal shares, shuffled.
pub fn make_dataset(kind: DatasetKind, count: usize, extent: usize, seed: u64) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(invalid("make_dataset", "count must be at least 1"));
    }
    let classes: Vec<ImageClass> = match kind {
        DatasetKind::Gradients => vec![ImageClass::Gradient; count],
        DatasetKind::Shapes => vec![ImageClass::Shapes; count],
        DatasetKind::Textures => vec![ImageClass::Texture; count],
        DatasetKind::Mixed => {
            let mut c: Vec<ImageClass> = (0..count).map(|i| ImageClass::ALL[i % 3]).collect();
            c.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(seed, &[0])));
            c
        }
    };
    Ok(classes
        .into_iter()
        .enumerate()
        .map(|(i, class)| Sample {
            class,
            image: render(class, extent, derive(seed, &[1, i as u64])),
        })
        .collect())
}

pub fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("img_{index:05}.ppm"))
}

pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    with_path(dir, std::fs::create_dir_all(dir))?;
    for (i, s) in samples.iter().enumerate() {
        s.image.write_ppm(&image_path(dir, i))?;
    }
    Ok(())
}

/// Every `*.ppm` file in `dir`, in name order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = with_path(dir, std::fs::read_dir(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(invalid("read_dataset", format!("no .ppm files in {}", dir.display())));
    }
    paths.iter().map(|p| Image::read_ppm(p)).collect()
}
