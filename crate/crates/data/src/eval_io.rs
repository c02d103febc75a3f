//! Scoring saved saliency maps against a dataset's ground truth.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use lfsamba::metrics::EvalReport;

use crate::dataset::{read_manifest, read_mask, MANIFEST, GT};
use crate::error::{DataError, Result};
use crate::image_io::read_gray8;

pub const METRICS_CSV: &str = "metrics.csv";
pub const PR_CURVE_CSV: &str = "pr_curve.csv";

pub fn prediction_file(id: &str) -> String {
    format!("{id}.png")
}

/// Manifest ids, or without a manifest every subdirectory holding a gt.
fn gt_ids(dataset: &Path) -> Result<Vec<String>> {
    if dataset.join(MANIFEST).exists() {
        return Ok(read_manifest(dataset)?.into_iter().map(|e| e.id).collect());
    }
    let mut ids = Vec::new();
    if dataset.is_dir() {
        for entry in fs::read_dir(dataset).map_err(|e| DataError::io(dataset, e))? {
            let path = entry.map_err(|e| DataError::io(dataset, e))?.path();
            if path.join(GT).is_file() {
                ids.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Scores `<pred_dir>/<id>.png` against `<dataset>/<id>/gt.png` for every
/// manifest entry (every `<id>/gt.png` when there is no manifest). Ids with
/// only one of the two files are listed in `missing` and skipped.
pub fn evaluate_dataset(pred_dir: &Path, dataset: &Path) -> Result<EvalReport> {
    let ids = gt_ids(dataset)?;
    let known: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    for id in &ids {
        let pred_path = pred_dir.join(prediction_file(id));
        let gt_path = dataset.join(id).join(GT);
        if !pred_path.exists() || !gt_path.exists() {
            missing.push(id.clone());
            continue;
        }
        let (h, w, pred) = read_gray8(&pred_path)?;
        let (gh, gw, gt) = read_mask(&gt_path)?;
        if (h, w) != (gh, gw) {
            return Err(DataError::Dimension(format!(
                "{id}: prediction is {h}×{w} but gt is {gh}×{gw}"
            )));
        }
        let pred: Vec<f64> = pred.iter().map(|&v| v as f64 / 255.0).collect();
        let gt: Vec<f64> = gt.iter().map(|&v| v as f64).collect();
        pairs.push((id.clone(), pred, gt));
    }
    if pred_dir.is_dir() {
        let mut orphans = Vec::new();
        for entry in fs::read_dir(pred_dir).map_err(|e| DataError::io(pred_dir, e))? {
            let name = entry.map_err(|e| DataError::io(pred_dir, e))?.file_name();
            if let Some(id) = name.to_string_lossy().strip_suffix(".png") {
                if !known.contains(id) {
                    orphans.push(id.to_string());
                }
            }
        }
        orphans.sort();
        missing.extend(orphans);
    }
    let mut report =
        EvalReport::from_samples(pairs.iter().map(|(id, p, g)| (id.clone(), p.as_slice(), g.as_slice())))?;
    report.missing = missing;
    Ok(report)
}

/// Writes `metrics.csv` and `pr_curve.csv` into `out`.
pub fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| DataError::io(out, e))?;
    for (name, text) in [(METRICS_CSV, report.metrics_csv()), (PR_CURVE_CSV, report.pr_curve_csv())] {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| DataError::io(&path, e))?;
    }
    Ok(())
}
