//! Independent oracles and executable constructions.
//!
//! The oracles here only evaluate the maps they check; they never reuse the
//! analytic derivative code under test.

mod bench;
mod construct;
mod experiments;

pub use bench::{complexity_bench, linear_fit_r2, poly_fit_r2, ComplexityReport, TimingRow};
pub use construct::{construction_suite, felu_construction, relu_construction, sup_error, Construction, MonotoneTarget};
pub use experiments::{
    abs_value_experiment, relu_flow_experiment, AbsMode, AbsValueConfig, AbsValueReport, FlowExperimentConfig,
    FlowExperimentReport,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::elf::{ElfRef, MIN_BREAKPOINT_WEIGHT};
use crate::error::Result;
use crate::felu::Activation;
use crate::flow::{FixedPointConfig, FlowStack, Layer};
use crate::tape::GradTape;
use crate::tensor::Tensor;

/// Outcome of one oracle comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub details: String,
}

impl OracleReport {
    /// Passes when `measured ≤ tolerance`, where `measured` is whichever of
    /// the two errors the oracle is declared against.
    pub fn new(name: &str, max_abs_err: f64, max_rel_err: f64, measured: f64, tolerance: f64, details: String) -> Self {
        Self {
            name: name.to_string(),
            max_abs_err,
            max_rel_err,
            tolerance,
            pass: measured <= tolerance,
            details,
        }
    }
}

/// Central-difference Jacobian `J[i][j] = ∂f_i/∂x_j`.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Tensor {
    let d = x.len();
    let mut cols = Vec::with_capacity(d);
    let mut xp = x.to_vec();
    for j in 0..d {
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        cols.push(fp.iter().zip(&fm).map(|(p, m)| (p - m) / (2.0 * h)).collect::<Vec<_>>());
    }
    let m = cols.first().map_or(0, Vec::len);
    let mut out = Tensor::zeros(&[m, d]);
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            out.set(i, j, *v);
        }
    }
    out
}

/// `ln |det A|` by partial-pivot Gaussian elimination.
pub fn log_abs_det(a: &Tensor) -> f64 {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap_or(c);
        m.swap(c, p);
        let piv = m[c][c];
        if piv == 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += piv.abs().ln();
        for r in c + 1..n {
            let f = m[r][c] / piv;
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    acc
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Maximizes a unimodal `f` on `[a, b]`.
fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Peak of `|g'|` near `x0` at stencil spacing `h`, found by fitting lines to
/// one-sided derivative estimates on both sides and intersecting them. The
/// second-order one-sided stencils are exact on quadratic pieces, so on a
/// piecewise-quadratic `g` the result is exact up to rounding. Returns the
/// peak and a better centre (where the lines cross, if that is near), or
/// `None` when a side is not a single line at this spacing.
fn kink_estimate(g: &impl Fn(f64) -> f64, x0: f64, h: f64) -> Option<(f64, f64)> {
    let off = 2.0 * h;
    let left = |p: f64| (3.0 * g(p) - 4.0 * g(p - h) + g(p - 2.0 * h)) / (2.0 * h);
    let right = |q: f64| (-3.0 * g(q) + 4.0 * g(q + h) - g(q + 2.0 * h)) / (2.0 * h);
    let p = [x0 - off, x0 - off - 2.0 * h, x0 - off - 4.0 * h];
    let q = [x0 + off, x0 + off + 2.0 * h, x0 + off + 4.0 * h];
    let dl = p.map(left);
    let dr = q.map(right);
    let scale = [x0 - off - 6.0 * h, x0 + off + 6.0 * h, x0]
        .iter()
        .map(|&x| g(x).abs())
        .fold(0.0, f64::max);
    let tol = 400.0 * f64::EPSILON * (1.0 + scale) / h;
    let ml = (dl[0] - dl[1]) / (p[0] - p[1]);
    let mr = (dr[1] - dr[0]) / (q[1] - q[0]);
    let lin_l = |x: f64| dl[0] + ml * (x - p[0]);
    let lin_r = |x: f64| dr[0] + mr * (x - q[0]);
    if (lin_l(p[2]) - dl[2]).abs() > tol || (lin_r(q[2]) - dr[2]).abs() > tol {
        return None;
    }
    let dm = ml - mr;
    // nearly parallel lines cross at a point set by rounding noise, whose
    // effect on a stencil value is a few ε·|g|/h
    let noise = 4.0 * f64::EPSILON * (1.0 + scale) / h;
    let xc = if dm.abs() * (q[0] - p[0]) > 40.0 * noise {
        (dr[0] - mr * q[0] - dl[0] + ml * p[0]) / dm
    } else {
        x0
    };
    let at = if (p[0]..=q[0]).contains(&xc) { xc } else { x0 };
    let next = if (xc - x0).abs() <= 16.0 * h { xc } else { x0 };
    Some((lin_l(at).abs().max(lin_r(at).abs()), next))
}

/// Kink estimate at the widest spacing that agrees with the narrowest one.
/// Wide stencils average out rounding but can reach past a neighbouring
/// kink; narrow ones cannot, so they arbitrate. Each spacing re-centres on
/// its own crossing point so its stencils stay clear of the kink.
fn kink_peak(g: &impl Fn(f64) -> f64, x0: f64, base: f64) -> Option<f64> {
    let spacings = [base * 0.04, base * 0.2, base];
    let estimates: Vec<Option<f64>> = spacings
        .iter()
        .map(|&h| {
            let mut est = kink_estimate(g, x0, h)?;
            for _ in 0..3 {
                match kink_estimate(g, est.1, h) {
                    Some(e) => est = e,
                    None => break,
                }
            }
            Some(est.0)
        })
        .collect();
    let reference = estimates.iter().flatten().next().copied()?;
    estimates
        .iter()
        .rev()
        .flatten()
        .copied()
        .find(|v| (v - reference).abs() <= 5e-7 * (1.0 + reference.abs()))
        .or(Some(reference))
}

/// `sup |g'|` on `range` from secant slopes over an `n`-interval grid. With
/// `refine`, every near-maximal local peak of the coarse slopes is located by
/// golden-section search and evaluated by one-sided line fits.
pub fn grid_lipschitz(g: impl Fn(f64) -> f64, range: (f64, f64), n: usize, refine: bool) -> f64 {
    let (lo, hi) = range;
    let dx = (hi - lo) / n as f64;
    let vals: Vec<f64> = (0..=n).map(|k| g(lo + k as f64 * dx)).collect();
    let slopes: Vec<f64> = vals.windows(2).map(|w| ((w[1] - w[0]) / dx).abs()).collect();
    let coarse = slopes.iter().copied().fold(0.0, f64::max);
    if !refine || n < 3 {
        return coarse;
    }
    // a peak between grid points exceeds its secant by at most about one
    // slope increment
    let jump = slopes.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    let floor = coarse - 2.0 * jump - 1e-12;
    let mut peaks: Vec<usize> = (0..n)
        .filter(|&k| {
            slopes[k] >= floor
                && (k == 0 || slopes[k] >= slopes[k - 1])
                && (k + 1 == n || slopes[k] >= slopes[k + 1])
        })
        .collect();
    peaks.dedup_by(|b, a| *b <= *a + 2);
    peaks.sort_by(|&a, &b| slopes[b].total_cmp(&slopes[a]));
    peaks.truncate(64);

    let mut best = coarse;
    let eta = (dx * 1e-2).max(1e-9);
    let phi = |x: f64| ((g(x + eta) - g(x - eta)) / (2.0 * eta)).abs();
    for k in peaks {
        let a = (lo + (k as f64 - 1.0) * dx).max(lo);
        let b = (lo + (k as f64 + 2.0) * dx).min(hi);
        let x0 = golden_max(phi, a, b, 80);
        // the search favours upward rounding noise in phi, so phi itself is
        // only a fallback
        best = best.max(kink_peak(&g, x0, (2.0 * dx).min(1e-4)).unwrap_or_else(|| phi(x0)));
    }
    best
}

/// Maximum of a continuous piecewise-smooth `f` on `[a, b]` by repeated
/// zooming: each level samples every bracket, keeps the near-best local maxima
/// and shrinks around them, so two close peaks are both followed.
fn zoom_max(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    const M: usize = 16;
    let mut best = f(a).max(f(b));
    let mut beams = vec![(a, b)];
    for _ in 0..14 {
        let mut next: Vec<(f64, f64, f64)> = Vec::new();
        for &(lo, hi) in &beams {
            let xs: Vec<f64> = (0..=M).map(|i| lo + (hi - lo) * i as f64 / M as f64).collect();
            let vals: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
            let top = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            best = best.max(top);
            let jump = vals.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
            for i in 0..=M {
                let local = (i == 0 || vals[i] >= vals[i - 1]) && (i == M || vals[i] >= vals[i + 1]);
                if local && vals[i] >= top - 2.0 * jump {
                    next.push((xs[i.saturating_sub(1)], xs[(i + 1).min(M)], vals[i]));
                }
            }
        }
        next.sort_by(|x, y| y.2.total_cmp(&x.2));
        next.truncate(8);
        beams = next.into_iter().map(|(lo, hi, _)| (lo, hi)).collect();
    }
    best
}

/// `sup |f|` on `range` from `n + 1` samples of a derivative evaluator `f`.
/// With `refine`, every near-maximal local peak of the samples is zoomed in on
/// until the bracket reaches rounding level.
pub fn grid_max_abs(f: impl Fn(f64) -> f64, range: (f64, f64), n: usize, refine: bool) -> f64 {
    let (lo, hi) = range;
    let dx = (hi - lo) / n as f64;
    let vals: Vec<f64> = (0..=n).map(|k| f(lo + k as f64 * dx).abs()).collect();
    let coarse = vals.iter().copied().fold(0.0, f64::max);
    if !refine || n < 2 {
        return coarse;
    }
    let jump = vals.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    let floor = coarse - 2.0 * jump - 1e-12;
    let mut peaks: Vec<usize> = (0..=n)
        .filter(|&k| {
            vals[k] >= floor && (k == 0 || vals[k] >= vals[k - 1]) && (k == n || vals[k] >= vals[k + 1])
        })
        .collect();
    peaks.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    peaks.truncate(32);
    let abs = |x: f64| f(x).abs();
    peaks
        .into_iter()
        .map(|k| {
            let a = (lo + (k as f64 - 1.0) * dx).max(lo);
            let b = (lo + (k as f64 + 1.0) * dx).min(hi);
            zoom_max(&abs, a, b)
        })
        .fold(coarse, f64::max)
}

/// Finite-difference check of the hypernetwork's autoregressive structure in
/// every ELF-AR layer: outputs for dimension `t` must not move with `x_{≥t}`.
pub fn mask_check(stack: &FlowStack, points: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = stack.dims();
    let mut worst = 0.0f64;
    for layer in stack.elf_layers() {
        let ppd = layer.hypernet().params_per_dim();
        for _ in 0..points {
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let jac = fd_jacobian(
                |v| {
                    layer
                        .elf_params(&Tensor::from_rows(&[v.to_vec()]).expect("one row"))
                        .expect("layer accepts its own width")
                        .into_vec()
                },
                &x,
                1e-5,
            );
            for t in 0..d {
                for j in 0..ppd {
                    for tp in t..d {
                        worst = worst.max(jac.at(t * ppd + j, tp).abs());
                    }
                }
            }
        }
    }
    Ok(OracleReport::new(
        "autoregressive-mask",
        worst,
        worst,
        worst,
        1e-10,
        format!("max |∂params_t/∂x_t'| for t' ≥ t over {points} points per layer"),
    ))
}

/// Stack log-determinant against `ln|det|` of a finite-difference Jacobian.
pub fn logdet_check(stack: &FlowStack, x: &Tensor) -> Result<OracleReport> {
    let out = stack.forward(x)?;
    let (mut abs, mut rel) = (0.0f64, 0.0f64);
    for b in 0..x.rows() {
        let jac = fd_jacobian(
            |v| {
                stack
                    .forward(&Tensor::from_rows(&[v.to_vec()]).expect("one row"))
                    .map(|o| o.z.into_vec())
                    .unwrap_or_else(|_| vec![f64::NAN; v.len()])
            },
            x.row(b),
            1e-5,
        );
        let fd = log_abs_det(&jac);
        let err = (out.logdet[b] - fd).abs();
        abs = abs.max(err);
        rel = rel.max(err / fd.abs().max(1.0));
    }
    Ok(OracleReport::new(
        "logdet-vs-fd-jacobian",
        abs,
        rel,
        rel,
        1e-4,
        format!("{} points, relative to max(|logdet|, 1)", x.rows()),
    ))
}

/// `‖invert(forward(x)) − x‖_∞`.
pub fn round_trip_check(stack: &FlowStack, x: &Tensor, fp: FixedPointConfig) -> Result<OracleReport> {
    let z = stack.forward(x)?.z;
    let (back, stats) = stack.inverse(&z, fp)?;
    let err = back.max_abs_diff(x);
    Ok(OracleReport::new(
        "round-trip",
        err,
        err,
        err,
        1e-6,
        format!(
            "{} points, mean fixed-point iterations per layer {:?}",
            x.rows(),
            stats.mean_iterations
        ),
    ))
}

/// Breakpoint span of a network, used to size oracle grids.
fn breakpoint_span(p: &ElfRef<'_>) -> f64 {
    p.w1.iter()
        .zip(p.b1)
        .filter(|(w, _)| w.abs() >= MIN_BREAKPOINT_WEIGHT)
        .flat_map(|(w, b)| [(-b / w).abs(), ((-1.0 - b) / w).abs()])
        .fold(0.0, f64::max)
}

/// Exact Lipschitz constants of hypernetwork-produced networks against the
/// grid oracle.
pub fn lipschitz_check(stack: &FlowStack, x: &Tensor, grid: usize) -> Result<OracleReport> {
    let (mut abs, mut rel, mut count) = (0.0f64, 0.0f64, 0);
    for layer in stack.elf_layers() {
        let params = layer.elf_params(x)?;
        let (h, act) = (layer.elf_hidden(), layer.activation());
        let ppd = 3 * h + 1;
        for b in 0..params.rows() {
            for chunk in params.row(b).chunks(ppd) {
                let p = ElfRef::from_flat(chunk)?;
                let span = breakpoint_span(&p) + 1.0;
                let oracle = grid_max_abs(|v| p.dx(v, act), (-span, span), grid, true);
                let exact = p.lipschitz(act).constant;
                let err = (exact - oracle).abs();
                abs = abs.max(err);
                rel = rel.max(err / exact.max(1.0));
                count += 1;
            }
        }
    }
    Ok(OracleReport::new(
        "lipschitz-vs-grid",
        abs,
        rel,
        rel,
        1e-6,
        format!("{count} networks, grid of {grid} intervals"),
    ))
}

/// Analytic NLL gradient against central differences on up to `max_entries`
/// randomly chosen parameter entries.
pub fn gradient_check(stack: &FlowStack, x: &Tensor, max_entries: usize, seed: u64) -> Result<OracleReport> {
    let mut model = stack.clone();
    let mut tape = GradTape::new();
    let out = model.forward_recorded(x, &mut tape)?;
    let n = x.rows() as f64;
    let mut gz = out.z;
    gz.scale(1.0 / n);
    let grads = model.backward(&mut tape, &gz, &vec![-1.0 / n; x.rows()])?;
    let nll = |m: &FlowStack| -> f64 {
        m.log_prob(x)
            .map(|lp| -lp.iter().sum::<f64>() / n)
            .unwrap_or(f64::NAN)
    };

    let mut entries: Vec<(usize, usize)> = model
        .params()
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).map(move |e| (i, e)))
        .collect();
    if entries.len() > max_entries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in 0..max_entries {
            let j = rng.random_range(k..entries.len());
            entries.swap(k, j);
        }
        entries.truncate(max_entries);
    }
    let h = 1e-5;
    let (mut abs, mut rel) = (0.0f64, 0.0f64);
    for &(i, e) in &entries {
        let orig = model.params()[i].data()[e];
        model.params_mut()[i].data_mut()[e] = orig + h;
        let fp = nll(&model);
        model.params_mut()[i].data_mut()[e] = orig - h;
        let fm = nll(&model);
        model.params_mut()[i].data_mut()[e] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let an = grads.tensors[i].data()[e];
        let err = (an - fd).abs();
        abs = abs.max(err);
        rel = rel.max(err / an.abs().max(fd.abs()).max(1e-3));
    }
    Ok(OracleReport::new(
        "nll-gradient-vs-fd",
        abs,
        rel,
        rel,
        1e-5,
        format!("{} entries, h = 1e-5, relative to max(|a|, |fd|, 1e-3)", entries.len()),
    ))
}

/// Riemann sum of `exp(log p)` over the cell centres of a `resolution²` grid
/// on `[lo, hi]²`.
pub fn quadrature_normalization(stack: &FlowStack, range: (f64, f64), resolution: usize) -> Result<f64> {
    if stack.dims() != 2 {
        return Err(crate::error::ElfError::Dimension(format!(
            "quadrature needs a 2-dim flow, got {}",
            stack.dims()
        )));
    }
    let grid = density_grid_points(range, resolution);
    let cell = ((range.1 - range.0) / resolution as f64).powi(2);
    let mut mass = 0.0;
    for start in (0..grid.rows()).step_by(8192) {
        let end = (start + 8192).min(grid.rows());
        mass += stack
            .log_prob(&grid.slice_rows(start, end))?
            .iter()
            .map(|v| v.exp())
            .sum::<f64>();
    }
    Ok(mass * cell)
}

/// Cell centres of a `resolution × resolution` grid on `[lo, hi]²`, with
/// `x1` varying slowest.
pub fn density_grid_points(range: (f64, f64), resolution: usize) -> Tensor {
    let step = (range.1 - range.0) / resolution as f64;
    let mut data = Vec::with_capacity(2 * resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            data.push(range.0 + (i as f64 + 0.5) * step);
            data.push(range.0 + (j as f64 + 0.5) * step);
        }
    }
    Tensor::from_vec(&[resolution * resolution, 2], data).expect("shape matches")
}

/// Runs the model oracles (mask, log-det, Lipschitz, gradient, round trip) on
/// `points` standard-normal inputs scaled by `spread`.
pub fn check_model(stack: &FlowStack, points: usize, spread: f64, seed: u64, fp: FixedPointConfig) -> Result<Vec<OracleReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = stack.dims();
    let x = Tensor::from_vec(
        &[points, d],
        (0..points * d).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect(),
    )?;
    let small = x.slice_rows(0, points.min(8));
    let mut reports = vec![
        mask_check(stack, 3, seed)?,
        logdet_check(stack, &small)?,
        lipschitz_check(stack, &small.slice_rows(0, small.rows().min(2)), 200_000)?,
        gradient_check(stack, &small, 200, seed)?,
    ];
    reports.push(match round_trip_check(stack, &x, fp) {
        Ok(r) => r,
        Err(e) => OracleReport {
            name: "round-trip".into(),
            max_abs_err: f64::INFINITY,
            max_rel_err: f64::INFINITY,
            tolerance: 1e-6,
            pass: false,
            details: e.to_string(),
        },
    });
    Ok(reports)
}

/// Activation of the ELF layers in a stack (FELU if there are none).
pub fn stack_activation(stack: &FlowStack) -> Activation {
    stack
        .layers()
        .iter()
        .find_map(|l| match l {
            Layer::ElfAr(e) => Some(e.activation()),
            Layer::ActNorm(_) => None,
        })
        .unwrap_or_default()
}
