//! Synthetic scribbles: one short random-walk stroke inside each class.

use std::path::Path;

use lfsamba::losses::{ScribbleMask, BACKGROUND, FOREGROUND, UNLABELED};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{read_manifest, read_mask, write_manifest, write_scribble, GT, SCRIBBLE};
use crate::error::{DataError, Result};

/// Erosion radius in pixels (square structuring element).
pub const ERODE: usize = 3;
/// Stroke length as a fraction of the region's bounding-box diagonal.
pub const STROKE_FRACTION: f64 = 0.2;

const STEPS: [(isize, isize); 8] = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)];

/// Keeps pixels whose whole (2r+1)² neighbourhood lies inside the region.
/// Pixels outside the image count as outside the region.
pub fn erode(region: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in r..h.saturating_sub(r) {
        for x in r..w.saturating_sub(r) {
            out[y * w + x] = (y - r..=y + r).all(|yy| (x - r..=x + r).all(|xx| region[yy * w + xx]));
        }
    }
    out
}

fn diameter(region: &[bool], w: usize) -> f64 {
    let mut lo = (usize::MAX, usize::MAX);
    let mut hi = (0, 0);
    for (i, _) in region.iter().enumerate().filter(|(_, &r)| r) {
        let (y, x) = (i / w, i % w);
        lo = (lo.0.min(y), lo.1.min(x));
        hi = (hi.0.max(y), hi.1.max(x));
    }
    (((hi.0 - lo.0 + 1).pow(2) + (hi.1 - lo.1 + 1).pow(2)) as f64).sqrt()
}

/// A self-avoiding 8-connected walk of about `STROKE_FRACTION` of the region
/// diameter, started at a random region pixel. Momentum keeps it stroke-like.
fn random_walk(region: &[bool], h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let members: Vec<usize> = (0..h * w).filter(|&i| region[i]).collect();
    let length = ((STROKE_FRACTION * diameter(region, w)).round() as usize).max(1);
    let mut cur = members[rng.random_range(0..members.len())];
    let mut stroke = vec![cur];
    let mut dir = rng.random_range(0..8usize);
    while stroke.len() < length {
        let mut choices: Vec<usize> = vec![dir, (dir + 1) % 8, (dir + 7) % 8];
        if rng.random_bool(0.3) {
            choices.swap(0, rng.random_range(1..3));
        }
        let mut rest: Vec<usize> = (0..8).filter(|d| !choices.contains(d)).collect();
        rest.shuffle(rng);
        choices.extend(rest);
        let next = choices.into_iter().find_map(|d| {
            let (dy, dx) = STEPS[d];
            let y = (cur / w) as isize + dy;
            let x = (cur % w) as isize + dx;
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                return None;
            }
            let j = y as usize * w + x as usize;
            (region[j] && !stroke.contains(&j)).then_some((d, j))
        });
        match next {
            Some((d, j)) => {
                dir = d;
                cur = j;
                stroke.push(j);
            }
            None => break,
        }
    }
    stroke
}

/// Builds a scribble from a binary mask (`1` = foreground).
///
/// Each class is eroded by [`ERODE`] pixels first; a class that vanishes
/// under erosion falls back to its un-eroded region. A class absent from
/// `gt` is a contract error.
pub fn synth_scribbles(gt: &[u8], h: usize, w: usize, seed: u64) -> Result<ScribbleMask> {
    if gt.len() != h * w {
        return Err(DataError::Dimension(format!("mask has {} pixels, expected {h}×{w}", gt.len())));
    }
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![UNLABELED; h * w];
    for (class, label) in [(1u8, FOREGROUND), (0u8, BACKGROUND)] {
        let region: Vec<bool> = gt.iter().map(|&v| (v != 0) == (class == 1)).collect();
        if !region.iter().any(|&r| r) {
            let name = if class == 1 { "foreground" } else { "background" };
            return Err(DataError::Contract(format!("mask has no {name} pixels")));
        }
        let eroded = erode(&region, h, w, ERODE);
        let region = if eroded.iter().any(|&r| r) { eroded } else { region };
        for i in random_walk(&region, h, w, rng) {
            labels[i] = label;
        }
    }
    Ok(ScribbleMask::new(h, w, labels)?)
}

/// Writes `scribble.png` for every sample in the dataset and marks the
/// manifest. Sample `i` uses a seed derived from `seed` and `i`.
pub fn scribble_dataset(root: &Path, seed: u64) -> Result<()> {
    let mut entries = read_manifest(root)?;
    for (i, entry) in entries.iter_mut().enumerate() {
        let dir = root.join(&entry.id);
        let (h, w, gt) = read_mask(&dir.join(GT))?;
        let mask = synth_scribbles(&gt, h, w, seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(i as u64))?;
        write_scribble(&dir.join(SCRIBBLE), &mask)?;
        entry.has_scribble = true;
    }
    write_manifest(root, &entries)
}
