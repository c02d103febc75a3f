//! Inference on single samples and whole datasets.

use std::fs;
use std::path::Path;

use lfsamba::metrics::EvalReport;
use lfsamba::model::{forward, ModelParams};
use lfsamba::{Scalar, Tensor};
use lfsamba_data::checkpoint::load_model;
use lfsamba_data::dataset::load_sample;
use lfsamba_data::eval_io::{evaluate_dataset, prediction_file, write_report};
use lfsamba_data::image_io::{to_bytes, write_gray8};

use crate::error::{CliError, Result};
use crate::train::{load_dataset, predict};

pub const SALIENCY: &str = "saliency.png";
pub const FEATURE_FILES: [&str; 3] = ["f0.png", "fslices.png", "ffused.png"];
pub const PRED_DIR: &str = "pred";

fn write_map(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    Ok(write_gray8(path, h, w, &to_bytes(values.iter().copied()))?)
}

/// Per-pixel L2 norm over channels of a `[d, h, w]` feature, min-max
/// scaled to [0, 1] (all zeros when the map is constant).
pub fn feature_energy<S: Scalar>(f: &Tensor<S>) -> Result<(usize, usize, Vec<f64>)> {
    let [d, h, w] = *f.shape() else {
        return Err(CliError::Model(lfsamba::Error::Contract(format!("feature must be [d, h, w], got {:?}", f.shape()))));
    };
    let plane = h * w;
    let data = f.data();
    let energy: Vec<f64> = (0..plane)
        .map(|p| (0..d).map(|c| data[c * plane + p].as_f64().powi(2)).sum::<f64>().sqrt())
        .collect();
    let lo = energy.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled = if hi > lo { energy.iter().map(|e| (e - lo) / (hi - lo)).collect() } else { vec![0.0; plane] };
    Ok((h, w, scaled))
}

/// Writes `saliency.png` for the sample in `sample_dir` into `out`, plus
/// the feature-energy maps when `dump_features` is set.
pub fn infer_sample<S: Scalar>(params: &ModelParams<S>, sample_dir: &Path, out: &Path, dump_features: bool) -> Result<Vec<f64>> {
    let stack = load_sample::<S>(sample_dir)?;
    let result = forward(&stack, params)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let (h, w) = stack.size();
    let saliency: Vec<f64> = result.saliency.data().iter().map(|v| v.as_f64()).collect();
    write_map(&out.join(SALIENCY), h, w, &saliency)?;
    if dump_features {
        for (name, f) in FEATURE_FILES.iter().zip([&result.f0, &result.f_slices, &result.f_fused]) {
            let (fh, fw, map) = feature_energy(f)?;
            write_map(&out.join(name), fh, fw, &map)?;
        }
    }
    Ok(saliency)
}

pub fn infer_checkpoint<S: Scalar>(ckpt: &Path, sample_dir: &Path, out: &Path, dump_features: bool) -> Result<Vec<f64>> {
    let (params, _) = load_model::<S>(ckpt)?;
    infer_sample(&params, sample_dir, out, dump_features)
}

/// Predicts every sample of `dataset` into `<out>/pred/<id>.png`, then
/// scores them and writes `metrics.csv` and `pr_curve.csv` into `out`.
pub fn eval_checkpoint<S: Scalar>(params: &ModelParams<S>, dataset: &Path, out: &Path) -> Result<EvalReport> {
    let pred_dir = out.join(PRED_DIR);
    fs::create_dir_all(&pred_dir).map_err(|e| CliError::io(&pred_dir, e))?;
    for (id, stack) in load_dataset::<S>(dataset)? {
        let (h, w) = stack.size();
        write_map(&pred_dir.join(prediction_file(&id)), h, w, &predict(params, &stack)?)?;
    }
    let report = evaluate_dataset(&pred_dir, dataset)?;
    write_report(&report, out)?;
    Ok(report)
}
