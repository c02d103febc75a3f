//! Parameter and latency comparison of the two slice-fusion variants.

use std::time::Instant;

use lfsamba::init::{rng, uniform};
use lfsamba::model::{forward, trainable_params, FocalStack, ModelConfig, ModelParams, SliceFusion};
use lfsamba::params::ModuleExt;
use lfsamba::Scalar;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: SliceFusion,
    pub trainable_params: usize,
    pub total_params: usize,
    pub mean_ms: f64,
    pub sd_ms: f64,
}

pub const BENCH_RUNS: usize = 20;
pub const BENCH_WARMUPS: usize = 3;

fn variant_name(v: SliceFusion) -> &'static str {
    match v {
        SliceFusion::Mamba => "mamba",
        SliceFusion::Concat => "concat",
    }
}

/// Times `runs` forward passes after `warmups` untimed ones for each
/// variant, on one random focal stack of the configured size.
pub fn bench_run<S: Scalar>(cfg: &ModelConfig, runs: usize, warmups: usize) -> Result<Vec<BenchRow>> {
    let r = &mut rng(cfg.init_seed ^ 0xBE9C);
    let n = cfg.image_size;
    let stack = FocalStack::<S> {
        all_focus: uniform(vec![3, n, n], 0.0, 1.0, r),
        slices: (0..cfg.slices).map(|_| uniform(vec![3, n, n], 0.0, 1.0, r)).collect(),
        gt: None,
        scribble: None,
    };
    let mut rows = Vec::new();
    for variant in [SliceFusion::Mamba, SliceFusion::Concat] {
        let cfg = ModelConfig { slice_fusion: variant, ..cfg.clone() };
        let params = ModelParams::<S>::init(&cfg)?;
        for _ in 0..warmups {
            forward(&stack, &params)?;
        }
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let start = Instant::now();
            forward(&stack, &params)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        let mean = times.iter().sum::<f64>() / runs.max(1) as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (runs.max(2) - 1) as f64;
        rows.push(BenchRow {
            variant,
            trainable_params: trainable_params(&params).iter().map(|(_, t)| t.len()).sum(),
            total_params: params.param_count(),
            mean_ms: mean,
            sd_ms: var.sqrt(),
        });
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut out = format!("{:<8} {:>16} {:>12} {:>20}\n", "variant", "trainable", "total", "forward ms");
    for r in rows {
        out.push_str(&format!(
            "{:<8} {:>16} {:>12} {:>20}\n",
            variant_name(r.variant),
            r.trainable_params,
            r.total_params,
            format!("{:.2} ± {:.2}", r.mean_ms, r.sd_ms)
        ));
    }
    out
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("variant,trainable_params,total_params,mean_ms,sd_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4}\n",
            variant_name(r.variant),
            r.trainable_params,
            r.total_params,
            r.mean_ms,
            r.sd_ms
        ));
    }
    out
}
