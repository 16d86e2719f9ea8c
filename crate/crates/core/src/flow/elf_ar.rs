//! ELF-AR: an autoregressive residual layer `y = x + g(x)` where, for each
//! dimension `t`, `g(x)_t` is a one-layer FELU network in `x_t` whose `3H + 1`
//! parameters come from a MADE hypernetwork of `x_{<t}`. Each network is scaled
//! by its exact Lipschitz constant so the Jacobian is triangular with diagonal
//! in `(1 − kappa, 1 + kappa)`.

use rand::Rng;
use rayon::prelude::*;

use crate::elf::{normalization_scale, ElfEval, ElfRef, LipschitzInfo};
use crate::error::{ElfError, Result};
use crate::felu::Activation;
use crate::made::{MadeCache, MadeHypernet};
use crate::tensor::Tensor;

/// Architecture of one ELF-AR layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ElfArConfig {
    pub dims: usize,
    pub elf_hidden: usize,
    pub hypernet_hidden: Vec<usize>,
    pub kappa: f64,
    pub activation: Activation,
    /// Treat the normalization scale as a constant in the backward pass.
    pub detach_lipschitz: bool,
}

impl ElfArConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.elf_hidden == 0 {
            return Err(ElfError::Config("dims and elf_hidden must be positive".into()));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(ElfError::Config(format!("kappa must lie in (0, 1], got {}", self.kappa)));
        }
        Ok(())
    }
}

/// Output-layer biases for one dimension: `w1 = 1`, breakpoints spread over
/// `[−3, 3]`, `w2 = b2 = 0`, so every network starts as `g ≡ 0`.
pub(crate) fn identity_output_bias(h: usize) -> Vec<f64> {
    let mut bias = vec![0.0; 3 * h + 1];
    for i in 0..h {
        let centre = -3.0 + 6.0 * (i as f64 + 0.5) / h as f64;
        bias[i] = 1.0;
        bias[h + i] = -0.5 - centre;
    }
    bias
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElfArLayer {
    pub(crate) hypernet: MadeHypernet,
    elf_hidden: usize,
    kappa: f64,
    activation: Activation,
    detach_lipschitz: bool,
}

/// Per-(sample, dimension) values kept for the backward pass.
#[derive(Clone, Copy, Debug)]
struct Site {
    eval: ElfEval,
    lip: LipschitzInfo,
    scale: f64,
    /// `1 + scale·g'(x_t)`, the Jacobian diagonal.
    diag: f64,
}

#[derive(Debug)]
pub(crate) struct ElfArCache {
    x: Tensor,
    made: MadeCache,
    params: Tensor,
    sites: Vec<Site>,
}

/// Normalization statistics of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LayerStats {
    /// Mean Lipschitz constant before normalization.
    pub mean_lipschitz: f64,
    /// Fraction of networks that were rescaled.
    pub frac_normalized: f64,
    pub count: usize,
}

impl LayerStats {
    pub fn merge(&mut self, other: &LayerStats) {
        let n = self.count + other.count;
        if n == 0 {
            return;
        }
        let (a, b) = (self.count as f64, other.count as f64);
        self.mean_lipschitz = (a * self.mean_lipschitz + b * other.mean_lipschitz) / n as f64;
        self.frac_normalized = (a * self.frac_normalized + b * other.frac_normalized) / n as f64;
        self.count = n;
    }
}

pub(crate) struct ElfArOutput {
    pub y: Tensor,
    pub logdet: Vec<f64>,
    pub stats: LayerStats,
    pub cache: Option<ElfArCache>,
}

impl ElfArLayer {
    pub fn new<R: Rng + ?Sized>(config: &ElfArConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let bias = identity_output_bias(config.elf_hidden);
        let hypernet = MadeHypernet::new(config.dims, &config.hypernet_hidden, &bias, rng)?;
        Ok(Self {
            hypernet,
            elf_hidden: config.elf_hidden,
            kappa: config.kappa,
            activation: config.activation,
            detach_lipschitz: config.detach_lipschitz,
        })
    }

    pub fn from_hypernet(hypernet: MadeHypernet, config: &ElfArConfig) -> Result<Self> {
        config.validate()?;
        if hypernet.dims() != config.dims || hypernet.params_per_dim() != 3 * config.elf_hidden + 1 {
            return Err(ElfError::Dimension("hypernetwork does not match ELF-AR config".into()));
        }
        Ok(Self {
            hypernet,
            elf_hidden: config.elf_hidden,
            kappa: config.kappa,
            activation: config.activation,
            detach_lipschitz: config.detach_lipschitz,
        })
    }

    pub fn config(&self) -> ElfArConfig {
        ElfArConfig {
            dims: self.dims(),
            elf_hidden: self.elf_hidden,
            hypernet_hidden: self.hypernet.hidden_sizes(),
            kappa: self.kappa,
            activation: self.activation,
            detach_lipschitz: self.detach_lipschitz,
        }
    }

    pub fn dims(&self) -> usize {
        self.hypernet.dims()
    }

    pub fn elf_hidden(&self) -> usize {
        self.elf_hidden
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn set_detach_lipschitz(&mut self, detach: bool) {
        self.detach_lipschitz = detach;
    }

    pub fn hypernet(&self) -> &MadeHypernet {
        &self.hypernet
    }

    pub fn hypernet_mut(&mut self) -> &mut MadeHypernet {
        &mut self.hypernet
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.dims() {
            return Err(ElfError::Dimension(format!(
                "ELF-AR layer over {} dims got {:?}",
                self.dims(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Raw (unnormalized) ELF parameters for every sample and dimension,
    /// `[B × d·(3H+1)]`.
    pub fn elf_params(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        self.hypernet.forward(x)
    }

    pub(crate) fn run(&self, x: &Tensor, record: bool) -> Result<ElfArOutput> {
        self.check(x)?;
        let (params, made) = self.hypernet.forward_cached(x)?;
        if let Err(e) = params.check_finite("hypernetwork output") {
            return Err(ElfError::Numeric(e.to_string()));
        }
        let (batch, d, h) = (x.rows(), self.dims(), self.elf_hidden);
        let ppd = 3 * h + 1;
        let (kappa, act) = (self.kappa, self.activation);

        let mut y = x.clone();
        let mut sites = vec![
            Site {
                eval: ElfEval::default(),
                lip: LipschitzInfo {
                    constant: 0.0,
                    argmax_point: 0.0,
                    argmax_branch: 0,
                    slope: 0.0,
                },
                scale: 1.0,
                diag: 1.0,
            };
            batch * d
        ];
        y.data_mut()
            .par_chunks_mut(d)
            .zip(sites.par_chunks_mut(d))
            .enumerate()
            .for_each(|(b, (yrow, srow))| {
                let prow = params.row(b);
                for t in 0..d {
                    let p = ElfRef::from_flat_unchecked(&prow[t * ppd..(t + 1) * ppd], h);
                    let xt = yrow[t];
                    let eval = p.eval(xt, act);
                    let lip = p.lipschitz(act);
                    let scale = normalization_scale(lip.constant, kappa);
                    yrow[t] = xt + scale * eval.value;
                    srow[t] = Site {
                        eval,
                        lip,
                        scale,
                        diag: 1.0 + scale * eval.d1,
                    };
                }
            });

        let mut logdet = vec![0.0; batch];
        let mut stats = LayerStats {
            count: batch * d,
            ..LayerStats::default()
        };
        for b in 0..batch {
            let row = &sites[b * d..(b + 1) * d];
            logdet[b] = row.iter().map(|s| s.diag.ln()).sum();
            if !logdet[b].is_finite() {
                return Err(ElfError::Numeric(format!(
                    "non-finite log-determinant for sample {b} (Jacobian diagonal {:?})",
                    row.iter().map(|s| s.diag).collect::<Vec<_>>()
                )));
            }
            for s in row {
                stats.mean_lipschitz += s.lip.constant;
                if s.lip.constant > kappa {
                    stats.frac_normalized += 1.0;
                }
            }
        }
        if stats.count > 0 {
            stats.mean_lipschitz /= stats.count as f64;
            stats.frac_normalized /= stats.count as f64;
        }
        let cache = record.then(|| ElfArCache {
            x: x.clone(),
            made,
            params,
            sites,
        });
        Ok(ElfArOutput {
            y,
            logdet,
            stats,
            cache,
        })
    }

    /// `(y, logdet)` with `logdet[b] = Σ_t log(1 + ∂(scale·g)_t/∂x_t)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let out = self.run(x, false)?;
        Ok((out.y, out.logdet))
    }

    /// Gradients for the hypernetwork parameters (accumulated into `grads`)
    /// and with respect to the layer input.
    pub(crate) fn backward(
        &self,
        cache: &ElfArCache,
        grad_y: &Tensor,
        grad_logdet: &[f64],
        grads: &mut [Tensor],
    ) -> Tensor {
        let (batch, d, h) = (cache.x.rows(), self.dims(), self.elf_hidden);
        let ppd = 3 * h + 1;
        let (kappa, act, detach) = (self.kappa, self.activation, self.detach_lipschitz);
        let mut grad_params = Tensor::zeros(&[batch, d * ppd]);
        let mut grad_x = Tensor::zeros(&[batch, d]);
        grad_params
            .data_mut()
            .par_chunks_mut(d * ppd)
            .zip(grad_x.data_mut().par_chunks_mut(d))
            .enumerate()
            .for_each(|(b, (gp_row, gx_row))| {
                let prow = cache.params.row(b);
                let xrow = cache.x.row(b);
                let gl = grad_logdet[b];
                for t in 0..d {
                    let site = &cache.sites[b * d + t];
                    let gy = grad_y.at(b, t);
                    let s = site.scale;
                    let e = site.eval;
                    let u = site.diag;
                    // y = x + s·g,  ℓ = ln(1 + s·g')
                    gx_row[t] = gy * u + gl * s * e.d2 / u;
                    let p = ElfRef::from_flat_unchecked(&prow[t * ppd..(t + 1) * ppd], h);
                    let out = &mut gp_row[t * ppd..(t + 1) * ppd];
                    p.accumulate_grad(xrow[t], act, gy * s, gl * s / u, out);
                    if !detach && site.lip.constant > kappa {
                        // s = κ/L,  ∂s/∂L = −κ/L²
                        let grad_s = gy * e.value + gl * e.d1 / u;
                        let lip = site.lip.constant;
                        p.accumulate_lipschitz_grad(&site.lip, act, -grad_s * kappa / (lip * lip), out);
                    }
                }
            });
        let grad_from_made = self.hypernet.backward(&cache.made, grad_params, grads);
        grad_x.axpy(1.0, &grad_from_made);
        grad_x
    }

    /// Solves `x + g(x) = y` by the fixed-point iteration `x_i = y − g(x_{i−1})`
    /// from `x_0 = y`, iterating each row until its residual
    /// `‖x + g(x) − y‖_∞` is at most `tol`. Returns the solution and the number
    /// of iterations each row took.
    pub fn invert(&self, y: &Tensor, max_iters: usize, tol: f64) -> Result<(Tensor, Vec<usize>)> {
        self.check(y)?;
        let (batch, d) = (y.rows(), self.dims());
        let mut x = y.clone();
        let mut iters = vec![0usize; batch];
        let mut active: Vec<usize> = (0..batch).collect();
        // residual map g(x) = forward(x) − x for the still-active rows
        let residual_map = |x: &Tensor, rows: &[usize]| -> Result<Tensor> {
            let sub = x.select_rows(rows);
            let (fx, _) = self.forward(&sub)?;
            let mut g = fx;
            g.axpy(-1.0, &sub);
            Ok(g)
        };
        let mut g = residual_map(&x, &active)?;
        let mut worst = f64::INFINITY;
        for _ in 0..max_iters {
            for (k, &b) in active.iter().enumerate() {
                for t in 0..d {
                    x.set(b, t, y.at(b, t) - g.at(k, t));
                }
                iters[b] += 1;
            }
            g = residual_map(&x, &active)?;
            let mut still = Vec::new();
            let mut keep = Vec::new();
            worst = 0.0;
            for (k, &b) in active.iter().enumerate() {
                let r = (0..d)
                    .map(|t| (x.at(b, t) + g.at(k, t) - y.at(b, t)).abs())
                    .fold(0.0, f64::max);
                if !r.is_finite() {
                    return Err(ElfError::Numeric(format!("fixed-point iterate diverged for sample {b}")));
                }
                if r > tol {
                    still.push(b);
                    keep.push(k);
                    worst = worst.max(r);
                }
            }
            if still.is_empty() {
                return Ok((x, iters));
            }
            g = g.select_rows(&keep);
            active = still;
        }
        Err(ElfError::Convergence {
            iterations: max_iters,
            residual: worst,
            failing: active,
        })
    }

    /// Iterates `x_i = y − g(x_{i−1})` for one row, returning `x_0..=x_n`.
    pub fn fixed_point_trace(&self, y: &[f64], n: usize) -> Result<Vec<Vec<f64>>> {
        let yt = Tensor::from_vec(&[1, y.len()], y.to_vec())?;
        let mut trace = vec![y.to_vec()];
        let mut x = yt.clone();
        for _ in 0..n {
            let (fx, _) = self.forward(&x)?;
            let next: Vec<f64> = (0..y.len()).map(|t| y[t] - (fx.at(0, t) - x.at(0, t))).collect();
            x = Tensor::from_vec(&[1, y.len()], next.clone())?;
            trace.push(next);
        }
        Ok(trace)
    }
}

/// Per-sample log-determinant bounds `d·ln(1 − kappa) ≤ logdet ≤ d·ln(1 + kappa)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogdetBounds {
    pub lower: f64,
    pub upper: f64,
    pub logdet: Vec<f64>,
    /// Indices of samples outside the bounds.
    pub violations: Vec<usize>,
}

impl LogdetBounds {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn logdet_bound_check(layer: &ElfArLayer, x: &Tensor) -> Result<LogdetBounds> {
    let (_, logdet) = layer.forward(x)?;
    let d = layer.dims() as f64;
    let lower = d * (1.0 - layer.kappa()).ln();
    let upper = d * (1.0 + layer.kappa()).ln();
    // networks normalized to exactly kappa touch the bounds up to rounding
    let slack = d * 1e-12;
    let violations = logdet
        .iter()
        .enumerate()
        .filter(|(_, &l)| !(l >= lower - slack && l <= upper + slack))
        .map(|(b, _)| b)
        .collect();
    Ok(LogdetBounds {
        lower,
        upper,
        logdet,
        violations,
    })
}
