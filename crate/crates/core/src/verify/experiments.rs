use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::BatchSource;
use crate::elf::ElfRef;
use crate::error::{ElfError, Result};
use crate::felu::Activation;
use crate::flow::{FlowStack, StackConfig};
use crate::tensor::Tensor;
use crate::train::{adam_step, dataset_nll, train, AdamState, LrSchedule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AbsMode {
    /// One ELF scaled by `1/max(1, L)` with the exact `L`.
    ExactLipschitz,
    /// Multilayer network whose weight matrices are each divided by
    /// `max(1, σ_max)`.
    SpectralNorm,
}

impl fmt::Display for AbsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AbsMode::ExactLipschitz => "exact-lipschitz",
            AbsMode::SpectralNorm => "spectral-norm",
        })
    }
}

impl FromStr for AbsMode {
    type Err = ElfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact-lipschitz" | "exact" => Ok(AbsMode::ExactLipschitz),
            "spectral-norm" | "spectral" => Ok(AbsMode::SpectralNorm),
            other => Err(ElfError::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbsValueConfig {
    /// Target is `target_scale·|x|`.
    pub target_scale: f64,
    /// ELF hidden size in exact mode.
    pub elf_hidden: usize,
    /// Hidden width and number of hidden layers in spectral mode.
    pub width: usize,
    pub depth: usize,
    pub spectral_activation: Activation,
    pub steps: usize,
    pub lr: f64,
    pub train_points: usize,
    pub seed: u64,
}

impl Default for AbsValueConfig {
    fn default() -> Self {
        Self {
            target_scale: 1.0,
            elf_hidden: 16,
            width: 32,
            depth: 3,
            spectral_activation: Activation::Relu,
            steps: 8000,
            lr: 5e-2,
            train_points: 201,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AbsValueReport {
    pub mode: AbsMode,
    /// `max |model − target|` on `[−1, 1]` at 10⁴ points per unit.
    pub max_error: f64,
    pub final_loss: f64,
    /// Lipschitz bound used for normalization at the end of training.
    pub lipschitz_bound: f64,
}

fn abs_grid(n: usize) -> Vec<f64> {
    (0..n).map(|k| -1.0 + 2.0 * k as f64 / (n - 1) as f64).collect()
}

/// Fits `target_scale·|x|` on `[−1, 1]` by squared loss under a 1-Lipschitz
/// constraint and reports the worst-case fit error.
pub fn abs_value_experiment(mode: AbsMode, config: &AbsValueConfig) -> Result<AbsValueReport> {
    if config.steps == 0 || config.train_points < 2 {
        return Err(ElfError::Config("need steps > 0 and at least 2 training points".into()));
    }
    match mode {
        AbsMode::ExactLipschitz => exact_abs(config),
        AbsMode::SpectralNorm => spectral_abs(config),
    }
}

fn schedule(config: &AbsValueConfig, step: usize) -> f64 {
    config.lr * 0.5f64.powi((4 * step / config.steps) as i32)
}

fn exact_abs(config: &AbsValueConfig) -> Result<AbsValueReport> {
    let h = config.elf_hidden;
    let act = Activation::Felu;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut flat = vec![0.0; 3 * h + 1];
    for i in 0..h {
        let w1 = rng.random_range(2.0..8.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let centre: f64 = rng.random_range(-1.0..1.0);
        flat[i] = w1;
        flat[h + i] = -w1 * centre;
        flat[2 * h + i] = 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    flat[3 * h] = 0.5 * config.target_scale;
    let mut param = Tensor::vector(flat);
    let mut adam = AdamState::new(&[&param]);
    let xs = abs_grid(config.train_points);
    let n = xs.len() as f64;
    let mut loss = 0.0;
    for step in 0..config.steps {
        let p = ElfRef::from_flat(param.data())?;
        let info = p.lipschitz(act);
        let scale = 1.0 / info.constant.max(1.0);
        let mut grad = vec![0.0; param.len()];
        let mut dscale = 0.0;
        loss = 0.0;
        for &x in &xs {
            let g = p.forward(x, act);
            let r = scale * g - config.target_scale * x.abs();
            loss += r * r / n;
            p.accumulate_grad(x, act, 2.0 * r / n * scale, 0.0, &mut grad);
            dscale += 2.0 * r / n * g;
        }
        if info.constant > 1.0 {
            p.accumulate_lipschitz_grad(&info, act, -dscale / (info.constant * info.constant), &mut grad);
        }
        adam_step(&mut adam, &mut [&mut param], &[Tensor::vector(grad)], schedule(config, step), 0.0);
    }
    let p = ElfRef::from_flat(param.data())?;
    let lip = p.lipschitz(act).constant;
    let scale = 1.0 / lip.max(1.0);
    let max_error = abs_grid(20_001)
        .into_iter()
        .map(|x| (scale * p.forward(x, act) - config.target_scale * x.abs()).abs())
        .fold(0.0, f64::max);
    Ok(AbsValueReport {
        mode: AbsMode::ExactLipschitz,
        max_error,
        final_loss: loss,
        lipschitz_bound: lip * scale,
    })
}

/// Dense layer `out × in`, row-major.
struct Dense {
    w: Vec<f64>,
    b: Vec<f64>,
    rows: usize,
    cols: usize,
}

/// Largest singular value with its singular vectors, by power iteration on
/// `WᵀW` started from `v`.
fn spectral_norm(w: &[f64], rows: usize, cols: usize, mut v: Vec<f64>) -> (f64, Vec<f64>, Vec<f64>) {
    let norm = |x: &mut Vec<f64>| {
        let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 0.0 {
            x.iter_mut().for_each(|a| *a /= n);
        }
        n
    };
    norm(&mut v);
    let mut sigma = 0.0;
    let mut u = vec![0.0; rows];
    for _ in 0..2000 {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = (0..cols).map(|j| w[i * cols + j] * v[j]).sum();
        }
        let s = norm(&mut u);
        let mut nv: Vec<f64> = (0..cols).map(|j| (0..rows).map(|i| w[i * cols + j] * u[i]).sum()).collect();
        norm(&mut nv);
        let done = (s - sigma).abs() <= 1e-14 * s.max(1.0);
        sigma = s;
        v = nv;
        if done {
            break;
        }
    }
    (sigma, u, v)
}

fn spectral_abs(config: &AbsValueConfig) -> Result<AbsValueReport> {
    let act = config.spectral_activation;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut widths = vec![1];
    widths.extend(std::iter::repeat_n(config.width, config.depth));
    widths.push(1);
    let mut layers: Vec<Dense> = widths
        .windows(2)
        .map(|wd| {
            let (cols, rows) = (wd[0], wd[1]);
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Dense {
                w: (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect(),
                b: (0..rows).map(|_| rng.random_range(-0.5..0.5)).collect(),
                rows,
                cols,
            }
        })
        .collect();
    let mut params: Vec<Tensor> = layers
        .iter()
        .flat_map(|l| [Tensor::vector(l.w.clone()), Tensor::vector(l.b.clone())])
        .collect();
    let mut adam = AdamState::new(&params.iter().collect::<Vec<_>>());
    let xs = abs_grid(config.train_points);
    let n = xs.len() as f64;

    let mut starts: Vec<Vec<f64>> = layers
        .iter()
        .map(|l| (0..l.cols).map(|j| 1.0 + 0.01 * j as f64).collect())
        .collect();
    let mut normalized = |layers: &[Dense]| -> Vec<(Vec<f64>, f64, Vec<f64>, Vec<f64>)> {
        layers
            .iter()
            .zip(&mut starts)
            .map(|(l, start)| {
                let (s, u, v) = spectral_norm(&l.w, l.rows, l.cols, start.clone());
                start.clone_from(&v);
                let c = s.max(1.0);
                (l.w.iter().map(|w| w / c).collect(), s, u, v)
            })
            .collect()
    };
    let forward = |layers: &[Dense], norm: &[(Vec<f64>, f64, Vec<f64>, Vec<f64>)], x: f64| {
        // pre-activations of every layer, with the input as the first entry
        let mut acts = vec![vec![x]];
        let mut pres = Vec::new();
        for (k, l) in layers.iter().enumerate() {
            let input = acts.last().expect("input present");
            let pre: Vec<f64> = (0..l.rows)
                .map(|i| l.b[i] + (0..l.cols).map(|j| norm[k].0[i * l.cols + j] * input[j]).sum::<f64>())
                .collect();
            let out = if k + 1 == layers.len() {
                pre.clone()
            } else {
                pre.iter().map(|&a| act.value(a)).collect()
            };
            pres.push(pre);
            acts.push(out);
        }
        (acts, pres)
    };

    let mut loss = 0.0;
    for step in 0..config.steps {
        let norm = normalized(&layers);
        let mut gw: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.w.len()]).collect();
        let mut gb: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.b.len()]).collect();
        loss = 0.0;
        for &x in &xs {
            let (acts, pres) = forward(&layers, &norm, x);
            let r = acts.last().expect("output")[0] - config.target_scale * x.abs();
            loss += r * r / n;
            let mut delta = vec![2.0 * r / n];
            for k in (0..layers.len()).rev() {
                let l = &layers[k];
                if k + 1 != layers.len() {
                    for (d, &a) in delta.iter_mut().zip(&pres[k]) {
                        *d *= act.d1(a);
                    }
                }
                for i in 0..l.rows {
                    gb[k][i] += delta[i];
                    for j in 0..l.cols {
                        gw[k][i * l.cols + j] += delta[i] * acts[k][j];
                    }
                }
                delta = (0..l.cols)
                    .map(|j| (0..l.rows).map(|i| norm[k].0[i * l.cols + j] * delta[i]).sum())
                    .collect();
            }
        }
        // through Ŵ = W/max(1, σ): ∂/∂W = G/σ − ⟨G, W⟩/σ²·u vᵀ when σ > 1
        let mut grads = Vec::with_capacity(params.len());
        for (k, l) in layers.iter().enumerate() {
            let (_, s, u, v) = &norm[k];
            let mut g = gw[k].clone();
            if *s > 1.0 {
                let inner: f64 = g.iter().zip(&l.w).map(|(a, b)| a * b).sum();
                for i in 0..l.rows {
                    for j in 0..l.cols {
                        g[i * l.cols + j] = g[i * l.cols + j] / s - inner / (s * s) * u[i] * v[j];
                    }
                }
            }
            grads.push(Tensor::vector(g));
            grads.push(Tensor::vector(gb[k].clone()));
        }
        adam_step(
            &mut adam,
            &mut params.iter_mut().collect::<Vec<_>>(),
            &grads,
            schedule(config, step),
            0.0,
        );
        for (k, l) in layers.iter_mut().enumerate() {
            l.w.copy_from_slice(params[2 * k].data());
            l.b.copy_from_slice(params[2 * k + 1].data());
        }
    }
    let norm = normalized(&layers);
    let bound: f64 = norm.iter().map(|(_, s, _, _)| s / s.max(1.0)).product();
    let max_error = abs_grid(20_001)
        .into_iter()
        .map(|x| (forward(&layers, &norm, x).0.last().expect("output")[0] - config.target_scale * x.abs()).abs())
        .fold(0.0, f64::max);
    Ok(AbsValueReport {
        mode: AbsMode::SpectralNorm,
        max_error,
        final_loss: loss,
        lipschitz_bound: bound,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowExperimentConfig {
    pub activation: Activation,
    pub flows: usize,
    pub elf_hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_points: usize,
    pub seed: u64,
}

impl Default for FlowExperimentConfig {
    fn default() -> Self {
        Self {
            activation: Activation::Felu,
            flows: 2,
            elf_hidden: 128,
            steps: 2000,
            batch_size: 256,
            lr: 5e-3,
            eval_points: 10_000,
            seed: 0,
        }
    }
}

/// NLLs of a one-dimensional flow fitted to `U(0, 1)` (true NLL 0).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowExperimentReport {
    pub activation: String,
    /// Before any data-dependent initialization.
    pub nll_untrained: f64,
    /// After ActNorm initialization on the first batch.
    pub nll_init: f64,
    pub nll_final: f64,
}

impl FlowExperimentReport {
    pub fn improvement(&self) -> f64 {
        self.nll_init - self.nll_final
    }
}

struct Uniform(ChaCha8Rng);

impl BatchSource for Uniform {
    fn dims(&self) -> usize {
        1
    }

    fn next_batch(&mut self, n: usize) -> Tensor {
        Tensor::from_vec(&[n, 1], (0..n).map(|_| self.0.random::<f64>()).collect()).expect("n values")
    }

    fn epoch_len(&self, _batch_size: usize) -> Option<usize> {
        None
    }
}

/// Trains a one-dimensional ELF-AR flow on `U(0, 1)` data.
pub fn relu_flow_experiment(config: &FlowExperimentConfig) -> Result<FlowExperimentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let stack = FlowStack::build(
        &StackConfig {
            dims: 1,
            flows: config.flows,
            elf_hidden: config.elf_hidden,
            hypernet_hidden: vec![32],
            kappa: 0.99,
            activation: config.activation,
            detach_lipschitz: false,
        },
        &mut rng,
    )?;
    let eval = Uniform(ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed)).next_batch(config.eval_points);
    let nll_untrained = dataset_nll(&stack, &eval, 4096)?;
    let mut source = Uniform(ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)));
    let mut initialized = stack.clone();
    initialized.initialize(&Uniform(ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1))).next_batch(config.batch_size))?;
    let nll_init = dataset_nll(&initialized, &eval, 4096)?;
    let outcome = train(
        stack,
        &mut source,
        None,
        &TrainConfig {
            steps: config.steps,
            batch_size: config.batch_size,
            lr: config.lr,
            lr_schedule: LrSchedule::HalveEvery((config.steps / 4).max(1)),
            seed: config.seed,
            ..TrainConfig::default()
        },
    )?;
    if let Some(abort) = outcome.aborted {
        return Err(abort.error);
    }
    Ok(FlowExperimentReport {
        activation: config.activation.to_string(),
        nll_untrained,
        nll_init,
        nll_final: dataset_nll(&outcome.stack, &eval, 4096)?,
    })
}
