use std::fmt;
use std::str::FromStr;

use crate::error::{ElfError, Result};
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// Adam moments for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction. Weight decay is decoupled and
/// applied first: `θ ← θ − lr·wd·θ`.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64, weight_decay: f64) {
    assert_eq!(params.len(), state.m.len(), "parameter list changed under the optimizer");
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let p = p.data_mut();
        for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            if weight_decay != 0.0 {
                *p -= lr * weight_decay * *p;
            }
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Clamps every gradient entry to `[−max, max]`.
pub fn clip_elementwise(grads: &mut Gradients, max: f64) {
    for t in &mut grads.tensors {
        *t = t.map(|g| g.clamp(-max, max));
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClipMode {
    #[default]
    GlobalNorm,
    Elementwise,
}

impl FromStr for ClipMode {
    type Err = ElfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm" | "global-norm" => Ok(ClipMode::GlobalNorm),
            "elementwise" | "value" => Ok(ClipMode::Elementwise),
            other => Err(ElfError::Config(format!("unknown clip mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Halve the rate every `K` steps.
    HalveEvery(usize),
    /// Multiply by `factor` after `patience` evaluations without a validation
    /// improvement larger than `threshold`, never going below `min_lr`.
    Plateau {
        factor: f64,
        patience: usize,
        min_lr: f64,
        threshold: f64,
    },
}

impl LrSchedule {
    pub fn plateau(patience: usize) -> Self {
        LrSchedule::Plateau {
            factor: 0.5,
            patience,
            min_lr: 1e-4,
            threshold: 1e-3,
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrSchedule::Constant => f.write_str("constant"),
            LrSchedule::HalveEvery(k) => write!(f, "halve:{k}"),
            LrSchedule::Plateau { patience, .. } => write!(f, "plateau:{patience}"),
        }
    }
}

impl FromStr for LrSchedule {
    type Err = ElfError;

    /// `constant`, `halve:K` or `plateau:PATIENCE`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || ElfError::Config(format!("bad lr schedule `{s}` (constant | halve:K | plateau:P)"));
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "constant" if arg.is_empty() => Ok(LrSchedule::Constant),
            "halve" => match arg.parse::<usize>() {
                Ok(k) if k > 0 => Ok(LrSchedule::HalveEvery(k)),
                _ => Err(bad()),
            },
            "plateau" => arg.parse().map(LrSchedule::plateau).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

/// Tracks the current learning rate under a schedule.
#[derive(Clone, Debug)]
pub struct LrController {
    schedule: LrSchedule,
    base: f64,
    current: f64,
    best: f64,
    stale: usize,
}

impl LrController {
    pub fn new(schedule: LrSchedule, base: f64) -> Self {
        Self {
            schedule,
            base,
            current: base,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Rate for zero-based `step`.
    pub fn lr(&mut self, step: usize) -> f64 {
        if let LrSchedule::HalveEvery(k) = self.schedule {
            self.current = self.base * 0.5f64.powi((step / k) as i32);
        }
        self.current
    }

    /// Feeds a validation loss (lower is better) to a plateau schedule.
    pub fn observe(&mut self, val_loss: f64) {
        if let LrSchedule::Plateau {
            factor,
            patience,
            min_lr,
            threshold,
        } = self.schedule
        {
            if val_loss < self.best - threshold {
                self.best = val_loss;
                self.stale = 0;
            } else {
                self.stale += 1;
                if self.stale >= patience {
                    self.current = (self.current * factor).max(min_lr);
                    self.stale = 0;
                }
            }
        }
    }
}
