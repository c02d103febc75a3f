//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.jsonl            one {"id", "k", "has_scribble"} per line
//! <root>/<id>/allfocus.png
//! <root>/<id>/slice_00.png ...     focus-depth order, contiguous from 00
//! <root>/<id>/gt.png               binarized at 128
//! <root>/<id>/scribble.png         0 unlabeled, 128 background, 255 foreground
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lfsamba::losses::{ScribbleMask, BACKGROUND, FOREGROUND, UNLABELED};
use lfsamba::model::FocalStack;
use lfsamba::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};
use crate::image_io::{read_gray8, read_rgb8, rgb_tensor, write_gray8};

pub const MANIFEST: &str = "manifest.jsonl";
pub const ALL_FOCUS: &str = "allfocus.png";
pub const GT: &str = "gt.png";
pub const SCRIBBLE: &str = "scribble.png";

pub fn slice_file(k: usize) -> String {
    format!("slice_{k:02}.png")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub k: usize,
    pub has_scribble: bool,
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|source| DataError::Json { path: path.clone(), source }))
        .collect()
}

pub fn write_manifest(root: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let path = root.join(MANIFEST);
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).map_err(|source| DataError::Json { path: path.clone(), source })?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(&path).map_err(|e| DataError::io(&path, e))?;
    f.write_all(&out).map_err(|e| DataError::io(&path, e))
}

/// Sample directories listed in the manifest, in manifest order.
pub fn sample_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    Ok(read_manifest(root)?
        .into_iter()
        .map(|e| {
            let dir = root.join(&e.id);
            (e.id, dir)
        })
        .collect())
}

/// Number of slices in `dir`; errors when the numbering has a gap.
pub fn count_slices(dir: &Path) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|e| DataError::io(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| DataError::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(idx) = name.strip_prefix("slice_").and_then(|r| r.strip_suffix(".png")) {
            if let Ok(k) = idx.parse::<usize>() {
                found.push(k);
            }
        }
    }
    found.sort_unstable();
    for (expect, &k) in found.iter().enumerate() {
        if k != expect {
            return Err(DataError::Contract(format!(
                "{}: {} is missing but {} exists",
                dir.display(),
                slice_file(expect),
                slice_file(k)
            )));
        }
    }
    if found.is_empty() {
        return Err(DataError::NotFound(dir.join(slice_file(0))));
    }
    Ok(found.len())
}

fn check_size(path: &Path, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(DataError::Dimension(format!(
            "{} is {}×{}, expected {}×{}",
            path.display(),
            got.0,
            got.1,
            want.0,
            want.1
        )));
    }
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w, bytes) = read_gray8(path)?;
    Ok((h, w, bytes.into_iter().map(|v| u8::from(v >= 128)).collect()))
}

pub fn read_scribble(path: &Path) -> Result<ScribbleMask> {
    let (h, w, bytes) = read_gray8(path)?;
    let labels = bytes
        .into_iter()
        .map(|v| match v {
            0 => Ok(UNLABELED),
            128 => Ok(BACKGROUND),
            255 => Ok(FOREGROUND),
            other => Err(DataError::Decode {
                path: path.to_path_buf(),
                detail: format!("scribble value {other} is not 0, 128 or 255"),
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScribbleMask::new(h, w, labels)?)
}

pub fn write_scribble(path: &Path, mask: &ScribbleMask) -> Result<()> {
    let (h, w) = mask.shape();
    let bytes: Vec<u8> = mask
        .labels()
        .iter()
        .map(|&l| match l {
            FOREGROUND => 255,
            BACKGROUND => 128,
            _ => 0,
        })
        .collect();
    write_gray8(path, h, w, &bytes)
}

/// Loads one sample directory; `gt.png` and `scribble.png` are optional.
pub fn load_sample<S: Scalar>(dir: &Path) -> Result<FocalStack<S>> {
    let af_path = dir.join(ALL_FOCUS);
    let (h, w, af) = read_rgb8(&af_path)?;
    let k = count_slices(dir)?;
    let slices = (0..k)
        .map(|i| {
            let p = dir.join(slice_file(i));
            let (sh, sw, bytes) = read_rgb8(&p)?;
            check_size(&p, (sh, sw), (h, w))?;
            Ok(rgb_tensor(h, w, &bytes))
        })
        .collect::<Result<Vec<_>>>()?;
    let gt_path = dir.join(GT);
    let gt = if gt_path.exists() {
        let (gh, gw, mask) = read_mask(&gt_path)?;
        check_size(&gt_path, (gh, gw), (h, w))?;
        Some(Tensor::from_fn(vec![h, w], |i| S::lit(mask[i] as f64)))
    } else {
        None
    };
    let sc_path = dir.join(SCRIBBLE);
    let scribble = if sc_path.exists() {
        let mask = read_scribble(&sc_path)?;
        check_size(&sc_path, mask.shape(), (h, w))?;
        Some(mask)
    } else {
        None
    };
    Ok(FocalStack { all_focus: rgb_tensor(h, w, &af), slices, gt, scribble })
}
