//! Training loop, training-set scoring and dataset loading.

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use lfsamba::init::rng;
use lfsamba::losses::total_loss;
use lfsamba::metrics::EvalReport;
use lfsamba::model::{forward, FocalStack, ModelParams};
use lfsamba::optim::Adam;
use lfsamba::{Scalar, Tape};
use lfsamba_data::checkpoint::save_model;
use lfsamba_data::dataset::{load_sample, sample_dirs};
use rand::seq::SliceRandom;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const RUN_CONFIG: &str = "run.json";

pub type Sample<S> = (String, FocalStack<S>);

/// Loads every sample listed in the manifest, in manifest order.
pub fn load_dataset<S: Scalar>(root: &Path) -> Result<Vec<Sample<S>>> {
    sample_dirs(root)?
        .into_iter()
        .map(|(id, dir)| Ok((id, load_sample(&dir)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub wall_ms: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {} loss {:.6} {:.1} ms", self.step, self.loss, self.wall_ms)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    Step(StepLog),
    Eval { step: u64, mae: f64, f_beta: Option<f64> },
}

impl fmt::Display for TrainEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainEvent::Step(s) => s.fmt(f),
            TrainEvent::Eval { step, mae, f_beta } => {
                write!(f, "eval step {step} mae {mae:.6}")?;
                match f_beta {
                    Some(v) => write!(f, " f_beta {v:.6}"),
                    None => write!(f, " f_beta n/a"),
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S: Scalar> {
    pub params: ModelParams<S>,
    pub steps: u64,
    /// Training-set scores at the last evaluation, if any ran.
    pub last_eval: Option<EvalReport>,
    pub reached_target: bool,
}

/// Saliency map of one sample as `f64` values, row-major.
pub fn predict<S: Scalar>(params: &ModelParams<S>, stack: &FocalStack<S>) -> Result<Vec<f64>> {
    let out = forward(stack, params)?;
    Ok(out.saliency.data().iter().map(|v| v.as_f64()).collect())
}

/// Scores predictions against each sample's dense gt.
pub fn evaluate_samples<S: Scalar>(params: &ModelParams<S>, samples: &[Sample<S>]) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(samples.len());
    for (id, stack) in samples {
        let gt = stack
            .gt
            .as_ref()
            .ok_or_else(|| CliError::Data(lfsamba_data::DataError::Contract(format!("{id} has no gt"))))?;
        let gt: Vec<f64> = gt.data().iter().map(|v| v.as_f64()).collect();
        rows.push((id.clone(), predict(params, stack)?, gt));
    }
    Ok(EvalReport::from_samples(rows.iter().map(|(id, p, g)| (id.clone(), p.as_slice(), g.as_slice())))?)
}

fn targets_met(cfg: &RunConfig, report: &EvalReport) -> bool {
    let Some(target) = cfg.target_mae else { return false };
    let mae_ok = report.mean_mae.is_some_and(|m| m <= target);
    let f_ok = match cfg.target_f_beta {
        Some(t) => report.mean_f_beta.is_some_and(|f| f >= t),
        None => true,
    };
    mae_ok && f_ok
}

/// Runs batch-size-1 training over `samples`, visiting them in a freshly
/// shuffled order every epoch. When `out` is given the run configuration,
/// periodic checkpoints and the final checkpoint are written there.
pub fn train<S: Scalar>(
    cfg: &RunConfig,
    samples: &[Sample<S>],
    out: Option<&Path>,
    on_event: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(CliError::Config("training set is empty".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(RUN_CONFIG);
        fs::write(&path, cfg.to_json() + "\n").map_err(|e| CliError::io(&path, e))?;
    }
    let mut params = ModelParams::<S>::init(&cfg.model)?;
    let mut adam = Adam::new(cfg.optim.clone());
    let mut order_rng = rng(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut last_eval = None;
    let mut reached_target = false;
    let mut step = 0u64;
    while step < cfg.steps {
        if order.is_empty() {
            order = (0..samples.len()).collect();
            order.shuffle(&mut order_rng);
            order.reverse();
        }
        let idx = order.pop().expect("refilled above");
        let start = Instant::now();
        let tape = Tape::new();
        let bound = params.bind_trainable(&tape)?;
        let stack = &samples[idx].1;
        let pred = forward(stack, &bound)?.saliency;
        let loss = total_loss(&pred, stack, cfg.mode, &cfg.loss)?;
        let grads = tape.backward(&loss)?;
        adam.step(&mut params, &grads)?;
        step += 1;
        on_event(&TrainEvent::Step(StepLog {
            step,
            loss: loss.item().as_f64(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        }));
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
                save_model(&dir.join(format!("step_{step:06}.ckpt")), &params, step, cfg.seed)?;
            }
        }
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let report = evaluate_samples(&params, samples)?;
            on_event(&TrainEvent::Eval {
                step,
                mae: report.mean_mae.unwrap_or(f64::NAN),
                f_beta: report.mean_f_beta,
            });
            reached_target = targets_met(cfg, &report);
            last_eval = Some(report);
            if reached_target {
                break;
            }
        }
    }
    if let Some(dir) = out {
        save_model(&dir.join(FINAL_CHECKPOINT), &params, step, cfg.seed)?;
    }
    Ok(TrainOutcome { params, steps: step, last_eval, reached_target })
}
