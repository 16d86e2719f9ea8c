use rand::Rng;

use crate::elf::ElfParams;
use crate::error::{ElfError, Result};
use crate::felu::Activation;
use crate::verify::OracleReport;

/// A one-layer network built to approximate a given function.
#[derive(Clone, Debug, PartialEq)]
pub struct Construction {
    pub params: ElfParams,
    pub activation: Activation,
}

impl Construction {
    pub fn eval(&self, x: f64) -> f64 {
        self.params.view().forward(x, self.activation)
    }

    pub fn lipschitz(&self) -> f64 {
        self.params.view().lipschitz(self.activation).constant
    }
}

/// Smooth increasing 1-Lipschitz function
/// `f(x) = slope·x + Σ_k c_k·tanh(s_k(x − m_k))/s_k` with
/// `slope + Σ c_k ≤ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MonotoneTarget {
    pub slope: f64,
    pub terms: Vec<(f64, f64, f64)>,
}

impl MonotoneTarget {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let k = rng.random_range(1..=4);
        let total: f64 = rng.random_range(0.3..1.0);
        let mut weights: Vec<f64> = (0..=k).map(|_| rng.random_range(0.05..1.0)).collect();
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w *= total / sum);
        Self {
            slope: weights[0],
            terms: weights[1..]
                .iter()
                .map(|&c| (c, rng.random_range(0.5..8.0), rng.random_range(-1.0..1.0)))
                .collect(),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.slope * x
            + self
                .terms
                .iter()
                .map(|&(c, s, m)| c * (s * (x - m)).tanh() / s)
                .sum::<f64>()
    }
}

fn knots(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect()
}

fn check_interval(a: f64, b: f64, eps: f64) -> Result<()> {
    if !(a < b && eps > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(ElfError::Config(format!(
            "need a < b and eps > 0, got [{a}, {b}], eps {eps}"
        )));
    }
    Ok(())
}

/// ReLU network with unit first-layer weights interpolating `f` at
/// `n = ⌈(b − a)/ε⌉` evenly spaced knots (`H = 2n`).
pub fn relu_construction(f: impl Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> Result<Construction> {
    check_interval(a, b, eps)?;
    let n = ((b - a) / eps).ceil() as usize;
    let xs = knots(a, b, n);
    let (mut w1, mut b1, mut w2) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let slope = (f(xs[i + 1]) - f(xs[i])) / (xs[i + 1] - xs[i]);
        w1.extend([1.0, 1.0]);
        b1.extend([-xs[i], -xs[i + 1]]);
        w2.extend([slope, -slope]);
    }
    Ok(Construction {
        params: ElfParams::new(w1, b1, w2, f(a))?,
        activation: Activation::Relu,
    })
}

/// FELU network with `n = ⌈2(b − a)/ε⌉` intervals (`H = 2n`) and first-layer
/// weights `2n/ε`. Each interval gets a unit whose quadratic piece starts at
/// the left knot and a unit with opposite output weight whose quadratic piece
/// ends at the right knot, so the slope returns to zero past the interval.
/// `b2` absorbs both units' `−1/2` left tails.
pub fn felu_construction(f: impl Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> Result<Construction> {
    check_interval(a, b, eps)?;
    let n = (2.0 * (b - a) / eps).ceil() as usize;
    let xs = knots(a, b, n);
    let w = 2.0 * n as f64 / eps;
    let (mut w1, mut b1, mut w2) = (Vec::new(), Vec::new(), Vec::new());
    let mut b2 = f(a);
    for i in 0..n {
        let slope = (f(xs[i + 1]) - f(xs[i])) / (xs[i + 1] - xs[i]);
        let (lo, hi) = (slope / w, -slope / w);
        w1.extend([w, w]);
        b1.extend([-1.0 - xs[i] * w, -xs[i + 1] * w]);
        w2.extend([lo, hi]);
        b2 += (lo + hi) / 2.0;
    }
    Ok(Construction {
        params: ElfParams::new(w1, b1, w2, b2)?,
        activation: Activation::Felu,
    })
}

/// `max |f − g|` over a grid with `per_unit` points per unit length on `[a, b]`.
pub fn sup_error(f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64, a: f64, b: f64, per_unit: usize) -> f64 {
    let n = (((b - a) * per_unit as f64).ceil() as usize).max(1);
    (0..=n)
        .map(|k| {
            let x = a + (b - a) * k as f64 / n as f64;
            (f(x) - g(x)).abs()
        })
        .fold(0.0, f64::max)
}

/// Grid density fine enough to resolve the narrowest FELU curvature region.
fn grid_density(c: &Construction) -> usize {
    let w = c.params.w1.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    ((20.0 * w).ceil() as usize).max(20_000)
}

/// Builds both constructions for a few 1-Lipschitz monotone targets and checks
/// sup error ≤ ε and, for FELU, Lipschitz constant ≤ 1 + 1e-9.
pub fn construction_suite() -> Result<Vec<OracleReport>> {
    type Target = (&'static str, fn(f64) -> f64, f64, f64, f64);
    let targets: [Target; 3] = [
        ("identity", |x| x, -2.0, 2.0, 0.1),
        ("half", |x| x / 2.0, 0.0, 1.0, 0.1),
        ("sin", |x| x.sin() / 2.0 + x / 2.0, -3.0, 3.0, 0.05),
    ];
    let mut out = Vec::new();
    for (name, f, a, b, eps) in targets {
        for c in [relu_construction(f, a, b, eps)?, felu_construction(f, a, b, eps)?] {
            let err = sup_error(f, |x| c.eval(x), a, b, grid_density(&c));
            let label = format!("construction-{}-{name}", c.activation);
            let details = format!("H={} eps={eps} on [{a}, {b}]", c.params.hidden());
            out.push(OracleReport::new(&label, err, err / eps, err, eps, details));
            if c.activation == Activation::Felu {
                let lip = c.lipschitz();
                let excess = (lip - 1.0).max(0.0);
                out.push(OracleReport::new(
                    &format!("{label}-lipschitz"),
                    excess,
                    excess,
                    excess,
                    1e-9,
                    format!("L={lip}"),
                ));
            }
        }
    }
    Ok(out)
}
