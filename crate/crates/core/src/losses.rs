//! Training objectives for dense masks and for scribble labels.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FocalStack;
use crate::scalar::Scalar;
use crate::tensor::{record, Tensor};

pub const UNLABELED: u8 = 0;
pub const FOREGROUND: u8 = 1;
pub const BACKGROUND: u8 = 2;

/// Sparse per-pixel labels: [`UNLABELED`], [`FOREGROUND`] or [`BACKGROUND`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScribbleMask {
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl ScribbleMask {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::dim("scribble", format!("{} labels for a {h}×{w} mask", labels.len())));
        }
        if let Some(v) = labels.iter().find(|&&v| v > BACKGROUND) {
            return Err(Error::contract(format!("scribble label {v} is not 0, 1 or 2")));
        }
        Ok(ScribbleMask { h, w, labels })
    }

    pub fn unlabeled(h: usize, w: usize) -> Self {
        ScribbleMask { h, w, labels: vec![UNLABELED; h * w] }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v != UNLABELED).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Dense ground-truth masks.
    Full,
    /// Foreground and background scribbles.
    Weak,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Extra weight on pixels that differ from their neighbourhood mean.
    pub edge_weight: f64,
    /// Side of the square neighbourhood for the edge weights.
    pub pool_window: usize,
    /// Predictions are clamped to `[clamp, 1 − clamp]` before logarithms.
    pub clamp: f64,
    pub lsc_radius: usize,
    pub lsc_sigma_xy: f64,
    pub lsc_sigma_rgb: f64,
    pub smooth_alpha: f64,
    pub lambda_lsc: f64,
    pub lambda_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            edge_weight: 5.0,
            pool_window: 31,
            clamp: 1e-7,
            lsc_radius: 5,
            lsc_sigma_xy: 3.0,
            lsc_sigma_rgb: 0.1,
            smooth_alpha: 10.0,
            lambda_lsc: 0.3,
            lambda_smooth: 0.3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.edge_weight >= 0.0
            && self.pool_window % 2 == 1
            && self.clamp > 0.0
            && self.clamp < 0.5
            && self.lsc_sigma_xy > 0.0
            && self.lsc_sigma_rgb > 0.0
            && self.smooth_alpha >= 0.0
            && self.lambda_lsc >= 0.0
            && self.lambda_smooth >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid loss constants {self:?}")))
        }
    }
}

fn map_dims<S: Scalar>(op: &'static str, pred: &Tensor<S>) -> Result<(usize, usize)> {
    match pred.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::dim(op, format!("prediction must be [H, W], got {s:?}"))),
    }
}

fn same_map<S: Scalar>(op: &'static str, pred: &Tensor<S>, other: &[usize]) -> Result<(usize, usize)> {
    let hw = map_dims(op, pred)?;
    if other != pred.shape() {
        return Err(Error::dim(op, format!("prediction {:?} vs target {other:?}", pred.shape())));
    }
    Ok(hw)
}

/// Mean of each `window × window` neighbourhood, counting only pixels
/// inside the map.
pub fn box_mean(values: &[f64], h: usize, w: usize, window: usize) -> Vec<f64> {
    let r = window / 2;
    // summed-area table with a zero border row and column
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] =
                values[y * w + x] + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
            out[y * w + x] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// Per-pixel weights `1 + edge_weight·|mean_window(gt) − gt|`.
pub fn edge_weights(gt: &[f64], h: usize, w: usize, cfg: &LossConfig) -> Vec<f64> {
    box_mean(gt, h, w, cfg.pool_window)
        .iter()
        .zip(gt)
        .map(|(m, g)| 1.0 + cfg.edge_weight * (m - g).abs())
        .collect()
}

/// Weighted binary cross entropy and weighted IoU, returned separately.
pub fn weighted_bce_iou_parts<S: Scalar>(
    pred: &Tensor<S>,
    gt: &Tensor<S>,
    cfg: &LossConfig,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (h, w) = same_map("weighted_bce_iou", pred, gt.shape())?;
    let g: Vec<f64> = gt.data().iter().map(|v| v.as_f64()).collect();
    let wt = edge_weights(&g, h, w, cfg);
    let w_sum: f64 = wt.iter().sum();
    let gw: Vec<f64> = wt.iter().zip(&g).map(|(a, b)| a * b).collect();
    let hw: Vec<f64> = wt.iter().zip(&g).map(|(a, b)| a * (1.0 - b)).collect();
    let gw_sum: f64 = gw.iter().sum();
    let gw = Tensor::from_f64(vec![h, w], &gw)?;
    let hw = Tensor::from_f64(vec![h, w], &hw)?;

    let eps = S::lit(cfg.clamp);
    let p = pred.clamp(eps, S::one() - eps);
    let ln_p = p.ln();
    let ln_q = p.neg().add_scalar(S::one()).ln();
    let bce = ln_p.mul(&gw)?.add(&ln_q.mul(&hw)?)?.sum().scale(S::lit(-1.0 / w_sum));

    let inter = pred.mul(&gw)?.sum().add_scalar(S::one());
    let union = pred.mul(&hw)?.sum().add_scalar(S::lit(gw_sum + 1.0));
    let iou = inter.div(&union)?.neg().add_scalar(S::one());
    Ok((bce, iou))
}

/// Dense-mask objective `wBCE + wIoU`.
pub fn weighted_bce_iou<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, cfg: &LossConfig) -> Result<Tensor<S>> {
    let (bce, iou) = weighted_bce_iou_parts(pred, gt, cfg)?;
    bce.add(&iou)
}

/// Binary cross entropy averaged over the labeled pixels; zero when none
/// are labeled.
pub fn partial_ce<S: Scalar>(pred: &Tensor<S>, scribble: &ScribbleMask, cfg: &LossConfig) -> Result<Tensor<S>> {
    let (h, w) = same_map("partial_ce", pred, &[scribble.h, scribble.w])?;
    let fg = Tensor::from_fn(vec![h, w], |i| if scribble.labels[i] == FOREGROUND { S::one() } else { S::zero() });
    let bg = Tensor::from_fn(vec![h, w], |i| if scribble.labels[i] == BACKGROUND { S::one() } else { S::zero() });
    let count = scribble.labeled_count().max(1) as f64;
    let eps = S::lit(cfg.clamp);
    let p = pred.clamp(eps, S::one() - eps);
    let ln_p = p.ln();
    let ln_q = p.neg().add_scalar(S::one()).ln();
    Ok(ln_p.mul(&fg)?.add(&ln_q.mul(&bg)?)?.sum().scale(S::lit(-1.0 / count)))
}

/// Offsets `(dy, dx)` with `0 < (dy, dx)` in row-major order and
/// `dy² + dx² ≤ r²`; each unordered pixel pair is produced once.
pub fn half_disc_offsets(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    let mut out = Vec::new();
    for dy in 0..=r {
        for dx in -r..=r {
            if (dy > 0 || dx > 0) && dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn image_dims<S: Scalar>(op: &'static str, image: &Tensor<S>, hw: (usize, usize)) -> Result<()> {
    if image.shape() != [3, hw.0, hw.1] {
        return Err(Error::dim(op, format!("image {:?} does not match map {hw:?}", image.shape())));
    }
    Ok(())
}

/// Local saliency coherence: `Σ K(i, j)·|p_i − p_j| / #pairs` over pixel
/// pairs within `lsc_radius`, with a Gaussian kernel on position and colour.
pub fn lsc_loss<S: Scalar>(pred: &Tensor<S>, image: &Tensor<S>, cfg: &LossConfig) -> Result<Tensor<S>> {
    let (h, w) = map_dims("lsc_loss", pred)?;
    image_dims("lsc_loss", image, (h, w))?;
    let img = image.data();
    let plane = h * w;
    let mut pairs: Vec<(usize, usize, S)> = Vec::new();
    for (dy, dx) in half_disc_offsets(cfg.lsc_radius) {
        let d_pos = (dy * dy + dx * dx) as f64 / (2.0 * cfg.lsc_sigma_xy * cfg.lsc_sigma_xy);
        for y in 0..h {
            let yy = y as isize + dy;
            if yy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = x as isize + dx;
                if xx < 0 || xx >= w as isize {
                    continue;
                }
                let (i, j) = (y * w + x, yy as usize * w + xx as usize);
                let mut d_rgb = 0.0;
                for c in 0..3 {
                    let diff = img[c * plane + i].as_f64() - img[c * plane + j].as_f64();
                    d_rgb += diff * diff;
                }
                let k = (-d_pos - d_rgb / (2.0 * cfg.lsc_sigma_rgb * cfg.lsc_sigma_rgb)).exp();
                pairs.push((i, j, S::lit(k)));
            }
        }
    }
    let norm = S::lit(1.0 / pairs.len().max(1) as f64);
    let p = pred.shared_data();
    let mut total = S::zero();
    for &(i, j, k) in &pairs {
        total += k * (p[i] - p[j]).abs();
    }
    let value = total * norm;
    Ok(record(&[pred], vec![], Rc::new(vec![value]), move |g, _| {
        let mut dp = vec![S::zero(); p.len()];
        let gs = g[0] * norm;
        for &(i, j, k) in &pairs {
            let diff = p[i] - p[j];
            let s = if diff > S::zero() {
                k * gs
            } else if diff < S::zero() {
                -(k * gs)
            } else {
                S::zero()
            };
            dp[i] += s;
            dp[j] -= s;
        }
        vec![Some(dp)]
    }))
}

/// Edge-aware smoothness: mean over pixels of
/// `|∂x p|·exp(−α|∂x I|) + |∂y p|·exp(−α|∂y I|)` with forward differences
/// and `I` the channel mean of the image.
pub fn smoothness_loss<S: Scalar>(pred: &Tensor<S>, image: &Tensor<S>, cfg: &LossConfig) -> Result<Tensor<S>> {
    let (h, w) = map_dims("smoothness_loss", pred)?;
    image_dims("smoothness_loss", image, (h, w))?;
    let plane = h * w;
    let img = image.data();
    let gray: Vec<f64> = (0..plane)
        .map(|i| (img[i].as_f64() + img[plane + i].as_f64() + img[2 * plane + i].as_f64()) / 3.0)
        .collect();
    // (pixel, right-or-below neighbour, weight)
    let mut edges: Vec<(usize, usize, S)> = Vec::with_capacity(2 * plane);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                edges.push((i, i + 1, S::lit((-cfg.smooth_alpha * (gray[i + 1] - gray[i]).abs()).exp())));
            }
            if y + 1 < h {
                edges.push((i, i + w, S::lit((-cfg.smooth_alpha * (gray[i + w] - gray[i]).abs()).exp())));
            }
        }
    }
    let norm = S::lit(1.0 / plane as f64);
    let p = pred.shared_data();
    let mut total = S::zero();
    for &(i, j, k) in &edges {
        total += k * (p[j] - p[i]).abs();
    }
    let value = total * norm;
    Ok(record(&[pred], vec![], Rc::new(vec![value]), move |g, _| {
        let mut dp = vec![S::zero(); p.len()];
        let gs = g[0] * norm;
        for &(i, j, k) in &edges {
            let diff = p[j] - p[i];
            let s = if diff > S::zero() {
                k * gs
            } else if diff < S::zero() {
                -(k * gs)
            } else {
                S::zero()
            };
            dp[j] += s;
            dp[i] -= s;
        }
        vec![Some(dp)]
    }))
}

/// Full: `weighted_bce_iou`. Weak: `partial_ce + λ_lsc·lsc + λ_sm·smoothness`.
pub fn total_loss<S: Scalar>(
    pred: &Tensor<S>,
    sample: &FocalStack<S>,
    mode: Supervision,
    cfg: &LossConfig,
) -> Result<Tensor<S>> {
    match mode {
        Supervision::Full => {
            let gt = sample
                .gt
                .as_ref()
                .ok_or_else(|| Error::contract("full supervision needs a ground-truth mask"))?;
            weighted_bce_iou(pred, gt, cfg)
        }
        Supervision::Weak => {
            let scribble = sample
                .scribble
                .as_ref()
                .ok_or_else(|| Error::contract("weak supervision needs a scribble mask"))?;
            let image = &sample.all_focus;
            partial_ce(pred, scribble, cfg)?
                .add(&lsc_loss(pred, image, cfg)?.scale(S::lit(cfg.lambda_lsc)))?
                .add(&smoothness_loss(pred, image, cfg)?.scale(S::lit(cfg.lambda_smooth)))
        }
    }
}
