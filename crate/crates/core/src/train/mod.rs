//! Maximum-likelihood training with Adam.

mod optim;

pub use optim::{adam_step, clip_elementwise, clip_global_norm, AdamState, ClipMode, LrController, LrSchedule};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use serde::Serialize;

use crate::data::BatchSource;
use crate::error::{ElfError, Result};
use crate::flow::{standard_normal_log_density, FlowStack, LayerStats};
use crate::tape::{GradTape, Gradients};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub grad_clip: Option<f64>,
    pub clip_mode: ClipMode,
    pub weight_decay: f64,
    pub seed: u64,
    pub polyak_decay: Option<f64>,
    /// Stop after this many evaluations without validation improvement.
    pub early_stop: Option<usize>,
    /// Steps between validation evaluations; defaults to one epoch for
    /// finite data.
    pub eval_every: Option<usize>,
    pub metrics_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 128,
            lr: 2e-3,
            lr_schedule: LrSchedule::HalveEvery(2500),
            grad_clip: Some(1.0),
            clip_mode: ClipMode::GlobalNorm,
            weight_decay: 0.0,
            seed: 0,
            polyak_decay: None,
            early_stop: None,
            eval_every: None,
            metrics_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ElfError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(ElfError::Config("batch size must be at least 2".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(ElfError::Config(format!("grad clip must be positive, got {c}")));
            }
        }
        if let Some(p) = self.polyak_decay {
            if !(0.0..1.0).contains(&p) {
                return Err(ElfError::Config(format!("polyak decay must lie in [0, 1), got {p}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(ElfError::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub mean_lip: f64,
    pub frac_normalized: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

#[derive(Debug)]
pub struct AbortInfo {
    pub step: usize,
    pub error: ElfError,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Final model: Polyak weights if enabled, the best validation weights
    /// under early stopping, and the last finite weights after an abort.
    pub stack: FlowStack,
    pub records: Vec<StepRecord>,
    pub steps_run: usize,
    pub best_val_loss: Option<f64>,
    pub aborted: Option<AbortInfo>,
}

/// Mean negative log-likelihood of `batch`.
pub fn nll_loss(stack: &FlowStack, batch: &Tensor) -> Result<f64> {
    let lp = stack.log_prob(batch)?;
    mean_nll(&lp, 0)
}

fn mean_nll(log_probs: &[f64], step: usize) -> Result<f64> {
    if let Some(sample) = log_probs.iter().position(|v| !v.is_finite()) {
        return Err(ElfError::NonFiniteLoss { step, sample });
    }
    Ok(-log_probs.iter().sum::<f64>() / log_probs.len() as f64)
}

/// Mean NLL over `data`, evaluated in chunks.
pub fn dataset_nll(stack: &FlowStack, data: &Tensor, chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut start = 0;
    while start < data.rows() {
        let end = (start + chunk).min(data.rows());
        let lp = stack.log_prob(&data.slice_rows(start, end))?;
        total += mean_nll(&lp, 0)? * (end - start) as f64;
        start = end;
    }
    Ok(total / data.rows() as f64)
}

/// Loss, parameter gradients and normalization statistics for one batch.
pub fn nll_loss_and_grad(stack: &FlowStack, batch: &Tensor, step: usize) -> Result<(f64, Gradients, LayerStats)> {
    let mut tape = GradTape::new();
    let out = stack.forward_recorded(batch, &mut tape)?;
    let lp: Vec<f64> = (0..batch.rows())
        .map(|b| standard_normal_log_density(out.z.row(b)) + out.logdet[b])
        .collect();
    let loss = mean_nll(&lp, step)?;
    let n = batch.rows() as f64;
    let mut grad_z = out.z;
    grad_z.scale(1.0 / n);
    let grads = stack.backward(&mut tape, &grad_z, &vec![-1.0 / n; batch.rows()])?;
    Ok((loss, grads, out.stats))
}

struct Shadow {
    decay: f64,
    params: Vec<Tensor>,
}

impl Shadow {
    fn update(&mut self, stack: &FlowStack) {
        for (s, p) in self.params.iter_mut().zip(stack.params()) {
            for (s, &p) in s.data_mut().iter_mut().zip(p.data()) {
                *s = self.decay * *s + (1.0 - self.decay) * p;
            }
        }
    }

    fn apply(&self, stack: &FlowStack) -> FlowStack {
        let mut out = stack.clone();
        for (dst, src) in out.params_mut().into_iter().zip(&self.params) {
            *dst = src.clone();
        }
        out
    }
}

/// Trains `stack` on batches from `source`. ActNorm layers are initialized
/// from the first batch. A non-finite loss or gradient stops training and
/// returns the last finite weights with [`TrainOutcome::aborted`] set.
pub fn train(
    mut stack: FlowStack,
    source: &mut dyn BatchSource,
    validation: Option<&Tensor>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if source.dims() != stack.dims() {
        return Err(ElfError::Dimension(format!(
            "{}-dim data for a {}-dim flow",
            source.dims(),
            stack.dims()
        )));
    }
    if config.early_stop.is_some() && validation.is_none() {
        return Err(ElfError::Config("early stopping needs a validation split".into()));
    }
    let mut metrics = match &config.metrics_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let eval_every = config
        .eval_every
        .or_else(|| source.epoch_len(config.batch_size))
        .unwrap_or(1000)
        .max(1);

    let mut adam = AdamState::new(&stack.params());
    let mut lr_ctl = LrController::new(config.lr_schedule, config.lr);
    let mut shadow: Option<Shadow> = None;
    let mut records = Vec::with_capacity(config.steps);
    let mut best: Option<(f64, FlowStack)> = None;
    let mut stale = 0;
    let mut aborted = None;
    let mut steps_run = 0;

    for step in 0..config.steps {
        let batch = source.next_batch(config.batch_size);
        if !stack.is_initialized() {
            stack.initialize(&batch)?;
            adam = AdamState::new(&stack.params());
        }
        let lr = lr_ctl.lr(step);
        let (loss, mut grads, stats) = match nll_loss_and_grad(&stack, &batch, step) {
            Ok(r) if r.1.is_finite() => r,
            Ok(_) => {
                aborted = Some(AbortInfo {
                    step,
                    error: ElfError::Numeric(format!("non-finite gradient at step {step}")),
                });
                break;
            }
            Err(error @ (ElfError::NonFiniteLoss { .. } | ElfError::Numeric(_))) => {
                aborted = Some(AbortInfo { step, error });
                break;
            }
            Err(e) => return Err(e),
        };
        let grad_norm = match (config.grad_clip, config.clip_mode) {
            (Some(c), ClipMode::GlobalNorm) => clip_global_norm(&mut grads, c),
            (Some(c), ClipMode::Elementwise) => {
                let n = grads.global_norm();
                clip_elementwise(&mut grads, c);
                n
            }
            (None, _) => grads.global_norm(),
        };
        let snapshot = stack.params().into_iter().cloned().collect::<Vec<_>>();
        adam_step(&mut adam, &mut stack.params_mut(), &grads.tensors, lr, config.weight_decay);
        if stack.params().iter().any(|p| !p.is_finite()) {
            for (dst, src) in stack.params_mut().into_iter().zip(snapshot) {
                *dst = src;
            }
            aborted = Some(AbortInfo {
                step,
                error: ElfError::Numeric(format!("non-finite parameters after step {step}")),
            });
            break;
        }
        if let Some(decay) = config.polyak_decay {
            shadow
                .get_or_insert_with(|| Shadow {
                    decay,
                    params: stack.params().into_iter().cloned().collect(),
                })
                .update(&stack);
        }
        steps_run = step + 1;

        let mut val_loss = None;
        if let Some(val) = validation {
            if steps_run % eval_every == 0 || steps_run == config.steps {
                let model = match &shadow {
                    Some(s) => s.apply(&stack),
                    None => stack.clone(),
                };
                let v = dataset_nll(&model, val, 4096).unwrap_or(f64::INFINITY);
                val_loss = Some(v);
                lr_ctl.observe(v);
                if best.as_ref().is_none_or(|(b, _)| v < *b) {
                    best = Some((v, model));
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
        }
        let record = StepRecord {
            step,
            loss,
            lr,
            grad_norm,
            mean_lip: stats.mean_lipschitz,
            frac_normalized: stats.frac_normalized,
            val_loss,
        };
        if let Some(w) = metrics.as_mut() {
            serde_json::to_writer(&mut *w, &record).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        records.push(record);
        if config.early_stop.is_some_and(|p| stale >= p) {
            break;
        }
    }
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }

    let best_val_loss = best.as_ref().map(|(v, _)| *v);
    let stack = match (config.early_stop, best, &shadow) {
        (Some(_), Some((_, model)), _) if aborted.is_none() => model,
        (_, _, Some(s)) if aborted.is_none() => s.apply(&stack),
        _ => stack,
    };
    Ok(TrainOutcome {
        stack,
        records,
        steps_run,
        best_val_loss,
        aborted,
    })
}
