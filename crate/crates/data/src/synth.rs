//! Synthetic focal stacks: a few flat shapes at distinct depths over a
//! textured far background, rendered sharp (all-focus) and refocused at K
//! evenly spaced focus depths with a Gaussian defocus proxy.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{slice_file, write_manifest, ManifestEntry, ALL_FOCUS, GT};
use crate::error::{DataError, Result};
use crate::image_io::{to_bytes, write_gray8, write_rgb8};

/// Depth of the background plane; shapes sit in front of it.
pub const FAR_DEPTH: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub size: usize,
    pub slices: usize,
    /// Blur in pixels per unit of depth distance from the focus plane.
    pub sigma0: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { size: 64, slices: 3, sigma0: 2.0 }
    }
}

/// One rendered sample, 8-bit, interleaved RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub size: usize,
    pub all_focus: Vec<u8>,
    pub slices: Vec<Vec<u8>>,
    /// 0 or 1 per pixel.
    pub gt: Vec<u8>,
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Disc,
    Ellipse,
    Rect,
    Triangle,
}

#[derive(Clone, Debug)]
struct Shape {
    kind: Kind,
    cx: f64,
    cy: f64,
    /// Half extent along x and y.
    rx: f64,
    ry: f64,
    color: [f64; 3],
    depth: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        match self.kind {
            Kind::Disc | Kind::Ellipse => u * u + v * v <= 1.0,
            Kind::Rect => u.abs() <= 1.0 && v.abs() <= 1.0,
            // apex up, base at v = 1
            Kind::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
        }
    }
}

struct Layer {
    /// Premultiplied planar RGB.
    color: Vec<f64>,
    alpha: Vec<f64>,
    depth: f64,
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index))
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> (Layer, [f64; 3]) {
    let base = random_color(rng);
    let (fx, fy) = (rng.random_range(1.0..4.0), rng.random_range(1.0..4.0));
    let (px, py) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let amp = rng.random_range(0.05..0.15);
    let plane = size * size;
    let mut color = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            let wave = amp * ((6.283 * fx * u + px).sin() * (6.283 * fy * v + py).cos());
            for c in 0..3 {
                let noise = rng.random_range(-0.04..0.04);
                color[c * plane + y * size + x] = (base[c] + wave + noise).clamp(0.0, 1.0);
            }
        }
    }
    (Layer { color, alpha: vec![1.0; plane], depth: FAR_DEPTH }, base)
}

fn random_shapes(size: usize, bg: [f64; 3], rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let count = rng.random_range(2..=4usize);
    let s = size as f64;
    // distinct depths, front to back, all nearer than the background
    let mut depths: Vec<f64> = Vec::with_capacity(count);
    let mut d = rng.random_range(0.0..0.3);
    for _ in 0..count {
        depths.push(d);
        d += rng.random_range(0.25..0.45);
    }
    (0..count)
        .map(|i| {
            let kind = match rng.random_range(0..4u8) {
                0 => Kind::Disc,
                1 => Kind::Ellipse,
                2 => Kind::Rect,
                _ => Kind::Triangle,
            };
            // the front-most shape is also the largest
            let r = if i == 0 { rng.random_range(0.18..0.28) } else { rng.random_range(0.07..0.15) } * s;
            let aspect = match kind {
                Kind::Disc => 1.0,
                _ => rng.random_range(0.7..1.3),
            };
            let mut color = random_color(rng);
            while color_distance(color, bg) < 0.45 {
                color = random_color(rng);
            }
            Shape {
                kind,
                cx: rng.random_range(0.3..0.7) * s,
                cy: rng.random_range(0.3..0.7) * s,
                rx: r * aspect,
                ry: r,
                color,
                depth: depths[i],
            }
        })
        .collect()
}

fn shape_layer(size: usize, shape: &Shape) -> Layer {
    let plane = size * size;
    let mut alpha = vec![0.0; plane];
    let mut color = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                let i = y * size + x;
                alpha[i] = 1.0;
                for c in 0..3 {
                    color[c * plane + i] = shape.color[c];
                }
            }
        }
    }
    Layer { color, alpha, depth: shape.depth }
}

/// Separable Gaussian blur of one plane with edge clamping.
pub fn gaussian_blur(plane: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    if sigma < 1e-3 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let n = size as isize;
    let clamp = |v: isize| v.clamp(0, n - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = kernel
                .iter()
                .zip(-radius..=radius)
                .map(|(k, d)| k * plane[y * size + clamp(x as isize + d)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = kernel
                .iter()
                .zip(-radius..=radius)
                .map(|(k, d)| k * tmp[clamp(y as isize + d) * size + x])
                .sum();
        }
    }
    out
}

/// Back-to-front "over" compositing; `focus = None` renders all in focus.
fn composite(layers: &[Layer], size: usize, focus: Option<f64>, sigma0: f64) -> Vec<u8> {
    let plane = size * size;
    let mut out = vec![0.0; 3 * plane];
    for layer in layers {
        let sigma = focus.map_or(0.0, |f| sigma0 * (layer.depth - f).abs());
        let alpha = gaussian_blur(&layer.alpha, size, sigma);
        for c in 0..3 {
            let col = gaussian_blur(&layer.color[c * plane..(c + 1) * plane], size, sigma);
            for i in 0..plane {
                out[c * plane + i] = col[i] + (1.0 - alpha[i]) * out[c * plane + i];
            }
        }
    }
    // planar -> interleaved
    to_bytes((0..3 * plane).map(|i| out[(i % 3) * plane + i / 3]))
}

/// Focus depths evenly spaced from the nearest shape plane to the
/// background.
pub fn focus_depths(k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![FAR_DEPTH / 2.0];
    }
    (0..k).map(|i| FAR_DEPTH * i as f64 / (k - 1) as f64).collect()
}

/// Renders sample `index` of the dataset generated from `seed`.
pub fn synth_sample(seed: u64, index: u64, cfg: &SynthConfig) -> SynthSample {
    let rng = &mut sample_rng(seed, index);
    let size = cfg.size;
    let (bg, bg_color) = background(size, rng);
    let mut shapes = random_shapes(size, bg_color, rng);
    let area = |s: &Shape| shape_layer(size, s).alpha.iter().filter(|&&a| a > 0.5).count();
    let salient_area = area(&shapes[0]);
    for other in shapes.iter_mut().skip(1) {
        while area(other) >= salient_area {
            other.rx *= 0.8;
            other.ry *= 0.8;
        }
    }
    let mut layers = vec![bg];
    // back to front
    layers.extend(shapes.iter().rev().map(|s| shape_layer(size, s)));
    let gt = shape_layer(size, &shapes[0]).alpha.iter().map(|&a| u8::from(a > 0.5)).collect();
    SynthSample {
        size,
        all_focus: composite(&layers, size, None, cfg.sigma0),
        slices: focus_depths(cfg.slices)
            .into_iter()
            .map(|f| composite(&layers, size, Some(f), cfg.sigma0))
            .collect(),
        gt,
    }
}

pub fn sample_id(index: usize) -> String {
    format!("{index:04}")
}

/// Writes `n` samples and the manifest under `root`.
pub fn synth_dataset(seed: u64, n: usize, cfg: &SynthConfig, root: &Path) -> Result<Vec<ManifestEntry>> {
    if cfg.size == 0 || cfg.slices == 0 || cfg.sigma0 < 0.0 {
        return Err(DataError::Contract(format!("invalid synthesis settings {cfg:?}")));
    }
    fs::create_dir_all(root).map_err(|e| DataError::io(root, e))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let s = synth_sample(seed, i as u64, cfg);
        let id = sample_id(i);
        let dir = root.join(&id);
        fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
        write_rgb8(&dir.join(ALL_FOCUS), s.size, s.size, &s.all_focus)?;
        for (k, slice) in s.slices.iter().enumerate() {
            write_rgb8(&dir.join(slice_file(k)), s.size, s.size, slice)?;
        }
        let gt: Vec<u8> = s.gt.iter().map(|&v| v * 255).collect();
        write_gray8(&dir.join(GT), s.size, s.size, &gt)?;
        entries.push(ManifestEntry { id, k: cfg.slices, has_scribble: false });
    }
    write_manifest(root, &entries)?;
    Ok(entries)
}
