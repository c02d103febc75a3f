//! Saliency evaluation: MAE, adaptive-threshold Fβ and precision–recall
//! curves.

use crate::error::{Error, Result};

/// Number of PR thresholds, `t_i = i / 255`.
pub const PR_THRESHOLDS: usize = 256;
pub const BETA2: f64 = 0.3;

fn check(op: &'static str, s: &[f64], gt: &[f64]) -> Result<()> {
    if s.len() != gt.len() {
        return Err(Error::dim(op, format!("map has {} pixels, gt has {}", s.len(), gt.len())));
    }
    if s.is_empty() {
        return Err(Error::dim(op, "empty map"));
    }
    Ok(())
}

fn positives(gt: &[f64]) -> usize {
    gt.iter().filter(|&&g| g >= 0.5).count()
}

/// Mean absolute error.
pub fn mae(s: &[f64], gt: &[f64]) -> Result<f64> {
    check("mae", s, gt)?;
    Ok(s.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.len() as f64)
}

/// Largest `i` with `i / 255 ≤ v`.
fn highest_passed(v: f64) -> Option<usize> {
    if !(v >= 0.0) {
        return None;
    }
    let mut i = ((v * 255.0).floor() as usize).min(PR_THRESHOLDS - 1);
    // guard against rounding in the product
    while i + 1 < PR_THRESHOLDS && v >= (i + 1) as f64 / 255.0 {
        i += 1;
    }
    while i > 0 && v < i as f64 / 255.0 {
        i -= 1;
    }
    Some(i)
}

/// `(precision, recall)` of `S ≥ i/255` for `i = 0..=255`; `None` when the
/// gt has no positive pixel. An empty prediction has precision 1.
pub fn pr_curve(s: &[f64], gt: &[f64]) -> Result<Option<Vec<(f64, f64)>>> {
    check("pr_curve", s, gt)?;
    let pos = positives(gt);
    if pos == 0 {
        return Ok(None);
    }
    // pixels bucketed by the highest threshold they still pass
    let mut hits = [0usize; PR_THRESHOLDS];
    let mut all = [0usize; PR_THRESHOLDS];
    for (&v, &g) in s.iter().zip(gt) {
        if let Some(i) = highest_passed(v) {
            all[i] += 1;
            if g >= 0.5 {
                hits[i] += 1;
            }
        }
    }
    let mut out = vec![(0.0, 0.0); PR_THRESHOLDS];
    let (mut tp, mut pp) = (0usize, 0usize);
    for i in (0..PR_THRESHOLDS).rev() {
        tp += hits[i];
        pp += all[i];
        let precision = if pp == 0 { 1.0 } else { tp as f64 / pp as f64 };
        out[i] = (precision, tp as f64 / pos as f64);
    }
    Ok(Some(out))
}

/// Fβ at the adaptive threshold `min(1, 2·mean(S))`. A pixel is positive
/// when `S ≥ threshold` and `S > 0`. `None` when the gt is empty.
pub fn f_beta(s: &[f64], gt: &[f64], beta2: f64) -> Result<Option<f64>> {
    check("f_beta", s, gt)?;
    let pos = positives(gt);
    if pos == 0 {
        return Ok(None);
    }
    let thr = (2.0 * s.iter().sum::<f64>() / s.len() as f64).min(1.0);
    let (mut tp, mut pp) = (0usize, 0usize);
    for (&v, &g) in s.iter().zip(gt) {
        if v >= thr && v > 0.0 {
            pp += 1;
            if g >= 0.5 {
                tp += 1;
            }
        }
    }
    if tp == 0 {
        return Ok(Some(0.0));
    }
    let p = tp as f64 / pp as f64;
    let r = tp as f64 / pos as f64;
    Ok(Some(f_beta_from(p, r, beta2)))
}

/// `(1 + β²)·P·R / (β²·P + R)`, zero when `P + R = 0`.
pub fn f_beta_from(p: f64, r: f64, beta2: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * p * r / (beta2 * p + r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub mae: f64,
    /// `None` for samples whose gt is empty.
    pub f_beta: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    /// Identifiers that had a prediction or a gt but not both.
    pub missing: Vec<String>,
    pub mean_mae: Option<f64>,
    pub mean_f_beta: Option<f64>,
    /// `(threshold, precision, recall)` averaged over samples with a
    /// nonempty gt; empty when there are none.
    pub pr_curve: Vec<(f64, f64, f64)>,
}

impl EvalReport {
    /// Evaluates `(id, prediction, gt)` triples in the given order.
    pub fn from_samples<'a>(items: impl IntoIterator<Item = (String, &'a [f64], &'a [f64])>) -> Result<Self> {
        let mut report = EvalReport::default();
        let mut curve_sum = vec![(0.0, 0.0); PR_THRESHOLDS];
        let mut curves = 0usize;
        let mut f_sum = 0.0;
        let mut f_count = 0usize;
        for (id, s, gt) in items {
            let m = mae(s, gt)?;
            let f = f_beta(s, gt, BETA2)?;
            if let Some(curve) = pr_curve(s, gt)? {
                for (acc, (p, r)) in curve_sum.iter_mut().zip(curve) {
                    acc.0 += p;
                    acc.1 += r;
                }
                curves += 1;
            }
            if let Some(f) = f {
                f_sum += f;
                f_count += 1;
            }
            report.samples.push(SampleMetrics { id, mae: m, f_beta: f });
        }
        let n = report.samples.len();
        if n > 0 {
            report.mean_mae = Some(report.samples.iter().map(|s| s.mae).sum::<f64>() / n as f64);
        }
        if f_count > 0 {
            report.mean_f_beta = Some(f_sum / f_count as f64);
        }
        if curves > 0 {
            report.pr_curve = curve_sum
                .iter()
                .enumerate()
                .map(|(i, (p, r))| (i as f64 / 255.0, p / curves as f64, r / curves as f64))
                .collect();
        }
        Ok(report)
    }

    /// `id,mae,f_beta`; the Fβ cell is empty for samples with an empty gt.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("id,mae,f_beta\n");
        for s in &self.samples {
            let f = s.f_beta.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", s.id, s.mae, f));
        }
        out
    }

    /// `threshold,precision,recall`.
    pub fn pr_curve_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall\n");
        for (t, p, r) in &self.pr_curve {
            out.push_str(&format!("{t},{p},{r}\n"));
        }
        out
    }
}
