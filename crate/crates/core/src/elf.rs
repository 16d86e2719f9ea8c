//! One-dimensional one-layer ELF networks
//! `g(x) = b2 + Σ_i w2[i]·σ(w1[i]·x + b1[i])` and their exact Lipschitz
//! constants.
//!
//! With FELU, `g'` is continuous and piecewise linear with kinks where a unit's
//! argument crosses `0` or `−1`, and constant beyond the outermost kink. The
//! supremum of `|g'|` is therefore attained at one of the `2H` breakpoints
//! `x = −b1/w1` and `x = −(1 + b1)/w1`; evaluating `g'` at each costs `O(H)`,
//! so the constant costs `O(H²)` per network.

use crate::error::{ElfError, Result};
use crate::felu::Activation;
use rayon::prelude::*;

/// Units with `|w1| below this` produce no breakpoint.
pub const MIN_BREAKPOINT_WEIGHT: f64 = 1e-300;

/// Owned parameters of one ELF network.
#[derive(Clone, Debug, PartialEq)]
pub struct ElfParams {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl ElfParams {
    pub fn new(w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: f64) -> Result<Self> {
        let h = w1.len();
        if h == 0 || b1.len() != h || w2.len() != h {
            return Err(ElfError::Dimension(format!(
                "ELF parameter lengths must agree and be >= 1 (w1 {h}, b1 {}, w2 {})",
                b1.len(),
                w2.len()
            )));
        }
        let p = Self { w1, b1, w2, b2 };
        if !p.view().is_finite() {
            return Err(ElfError::Numeric("non-finite ELF parameter".into()));
        }
        Ok(p)
    }

    /// Parses the flat layout `w1 | b1 | w2 | b2` (length `3H + 1`).
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        let v = ElfRef::from_flat(flat)?;
        Self::new(v.w1.to_vec(), v.b1.to_vec(), v.w2.to_vec(), v.b2)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.hidden() + 1);
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
        out
    }

    pub fn hidden(&self) -> usize {
        self.w1.len()
    }

    pub fn view(&self) -> ElfRef<'_> {
        ElfRef {
            w1: &self.w1,
            b1: &self.b1,
            w2: &self.w2,
            b2: self.b2,
        }
    }

    /// Multiplies the output layer, giving `scale·g`.
    pub fn scaled(&self, scale: f64) -> ElfParams {
        ElfParams {
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            w2: self.w2.iter().map(|w| w * scale).collect(),
            b2: self.b2 * scale,
        }
    }
}

/// Borrowed view of ELF parameters, used on the hot paths where the
/// parameters live inside a hypernetwork output row.
#[derive(Clone, Copy, Debug)]
pub struct ElfRef<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: f64,
}

/// Value, first and second derivative of `g` at a point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElfEval {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Where the Lipschitz constant was attained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzInfo {
    /// `sup_x |g'(x)|`.
    pub constant: f64,
    /// Location of the maximizing candidate (`±∞` for the tail slopes).
    pub argmax_point: f64,
    /// Candidate index: `2i` is `x = −b1[i]/w1[i]`, `2i + 1` is
    /// `x = −(1 + b1[i])/w1[i]`, `2H` the `+∞` tail and `2H + 1` the `−∞` tail.
    /// For ReLU both `2i` and `2i + 1` sit at `−b1[i]/w1[i]` with unit `i`
    /// inactive and active respectively.
    pub argmax_branch: usize,
    /// `g'` at the argmax, with sign.
    pub slope: f64,
}

impl<'a> ElfRef<'a> {
    pub fn from_flat(flat: &'a [f64]) -> Result<Self> {
        if flat.len() < 4 || (flat.len() - 1) % 3 != 0 {
            return Err(ElfError::Dimension(format!(
                "flat ELF parameters must have length 3H+1, got {}",
                flat.len()
            )));
        }
        let h = (flat.len() - 1) / 3;
        Ok(Self::from_flat_unchecked(flat, h))
    }

    #[inline]
    pub(crate) fn from_flat_unchecked(flat: &'a [f64], h: usize) -> Self {
        ElfRef {
            w1: &flat[..h],
            b1: &flat[h..2 * h],
            w2: &flat[2 * h..3 * h],
            b2: flat[3 * h],
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.len()
    }

    pub fn is_finite(&self) -> bool {
        self.b2.is_finite()
            && self
                .w1
                .iter()
                .chain(self.b1)
                .chain(self.w2)
                .all(|v| v.is_finite())
    }

    #[inline]
    pub fn forward(&self, x: f64, act: Activation) -> f64 {
        let mut acc = self.b2;
        for i in 0..self.hidden() {
            acc += self.w2[i] * act.value(self.w1[i] * x + self.b1[i]);
        }
        acc
    }

    #[inline]
    pub fn dx(&self, x: f64, act: Activation) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.hidden() {
            acc += self.w2[i] * self.w1[i] * act.d1(self.w1[i] * x + self.b1[i]);
        }
        acc
    }

    pub fn eval(&self, x: f64, act: Activation) -> ElfEval {
        let mut e = ElfEval {
            value: self.b2,
            ..ElfEval::default()
        };
        for i in 0..self.hidden() {
            let (w1, w2) = (self.w1[i], self.w2[i]);
            let a = w1 * x + self.b1[i];
            e.value += w2 * act.value(a);
            e.d1 += w2 * w1 * act.d1(a);
            e.d2 += w2 * w1 * w1 * act.d2(a);
        }
        e
    }

    /// `g'(c)` with unit `pinned` forced to activation slope `phi`.
    #[inline]
    fn pinned_slope(&self, c: f64, pinned: usize, phi: f64, act: Activation) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.hidden() {
            let s = if i == pinned {
                phi
            } else {
                act.d1(self.w1[i] * c + self.b1[i])
            };
            acc += self.w2[i] * self.w1[i] * s;
        }
        acc
    }

    /// Candidate `branch` as (point, pinned unit, pinned argument, pinned slope).
    fn candidate(&self, branch: usize, act: Activation) -> (f64, usize, f64, f64) {
        let i = branch / 2;
        let upper = branch % 2 == 1;
        match act {
            Activation::Felu => {
                // a = 0 (slope 1) or a = −1 (slope 0)
                let a = if upper { -1.0 } else { 0.0 };
                ((a - self.b1[i]) / self.w1[i], i, a, if upper { 0.0 } else { 1.0 })
            }
            Activation::Relu => (-self.b1[i] / self.w1[i], i, 0.0, if upper { 1.0 } else { 0.0 }),
        }
    }

    fn tail_slope(&self, positive: bool) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.hidden() {
            let w1 = self.w1[i];
            if (positive && w1 > 0.0) || (!positive && w1 < 0.0) {
                acc += self.w2[i] * w1;
            }
        }
        acc
    }

    /// Exact `sup_x |g'(x)|` from the `2H` breakpoint candidates and the two
    /// tail slopes. Ties go to the lowest candidate index.
    pub fn lipschitz(&self, act: Activation) -> LipschitzInfo {
        let h = self.hidden();
        let mut best = LipschitzInfo {
            constant: -1.0,
            argmax_point: f64::NAN,
            argmax_branch: usize::MAX,
            slope: 0.0,
        };
        for branch in 0..2 * h {
            if self.w1[branch / 2].abs() < MIN_BREAKPOINT_WEIGHT {
                continue;
            }
            let (c, unit, _, phi) = self.candidate(branch, act);
            let s = self.pinned_slope(c, unit, phi, act);
            if s.abs() > best.constant {
                best = LipschitzInfo {
                    constant: s.abs(),
                    argmax_point: c,
                    argmax_branch: branch,
                    slope: s,
                };
            }
        }
        for (k, positive) in [(0, true), (1, false)] {
            let s = self.tail_slope(positive);
            if s.abs() > best.constant {
                best = LipschitzInfo {
                    constant: s.abs(),
                    argmax_point: if positive { f64::INFINITY } else { f64::NEG_INFINITY },
                    argmax_branch: 2 * h + k,
                    slope: s,
                };
            }
        }
        best
    }

    /// `out += cy·∂g(x)/∂θ + cd·∂g'(x)/∂θ` in the flat layout `w1|b1|w2|b2`.
    pub fn accumulate_grad(&self, x: f64, act: Activation, cy: f64, cd: f64, out: &mut [f64]) {
        let h = self.hidden();
        for i in 0..h {
            let (w1, w2) = (self.w1[i], self.w2[i]);
            let a = w1 * x + self.b1[i];
            let (f0, f1, f2) = (act.value(a), act.d1(a), act.d2(a));
            // g:  ∂w1 = w2 f1 x, ∂b1 = w2 f1, ∂w2 = f0
            // g': ∂w1 = w2 f1 + w2 w1 f2 x, ∂b1 = w2 w1 f2, ∂w2 = w1 f1
            out[i] += cy * w2 * f1 * x + cd * (w2 * f1 + w2 * w1 * f2 * x);
            out[h + i] += cy * w2 * f1 + cd * w2 * w1 * f2;
            out[2 * h + i] += cy * f0 + cd * w1 * f1;
        }
        out[3 * h] += cy;
    }

    /// `out += coeff·∂L/∂θ`, differentiating through the argmax candidate in
    /// `info` (the candidate's own location moves with its unit's parameters).
    pub fn accumulate_lipschitz_grad(
        &self,
        info: &LipschitzInfo,
        act: Activation,
        coeff: f64,
        out: &mut [f64],
    ) {
        let h = self.hidden();
        if info.slope == 0.0 || info.argmax_branch == usize::MAX {
            return;
        }
        let c = coeff * info.slope.signum();
        if info.argmax_branch >= 2 * h {
            let positive = info.argmax_branch == 2 * h;
            for i in 0..h {
                let w1 = self.w1[i];
                if (positive && w1 > 0.0) || (!positive && w1 < 0.0) {
                    out[i] += c * self.w2[i];
                    out[2 * h + i] += c * w1;
                }
            }
            return;
        }
        let (x, j, _, phi) = self.candidate(info.argmax_branch, act);
        let mut curvature = 0.0;
        for i in 0..h {
            if i == j {
                continue;
            }
            let (w1, w2) = (self.w1[i], self.w2[i]);
            let a = w1 * x + self.b1[i];
            let (f1, f2) = (act.d1(a), act.d2(a));
            out[i] += c * (w2 * f1 + w2 * w1 * f2 * x);
            out[h + i] += c * w2 * w1 * f2;
            out[2 * h + i] += c * w1 * f1;
            curvature += w2 * w1 * w1 * f2;
        }
        // x = (a* − b1_j)/w1_j:  ∂x/∂w1_j = −x/w1_j,  ∂x/∂b1_j = −1/w1_j
        let w1j = self.w1[j];
        out[j] += c * (self.w2[j] * phi - curvature * x / w1j);
        out[h + j] += c * (-curvature / w1j);
        out[2 * h + j] += c * w1j * phi;
    }
}

pub fn elf_forward(p: &ElfParams, x: f64) -> f64 {
    p.view().forward(x, Activation::Felu)
}

pub fn elf_dx(p: &ElfParams, x: f64) -> f64 {
    p.view().dx(x, Activation::Felu)
}

pub fn elf_lipschitz(p: &ElfParams) -> LipschitzInfo {
    p.view().lipschitz(Activation::Felu)
}

/// Factor bringing a network with Lipschitz constant `lip` down to at most `kappa`.
#[inline]
pub fn normalization_scale(lip: f64, kappa: f64) -> f64 {
    kappa / kappa.max(lip)
}

/// Lipschitz constants of a batch of networks stored back to back in the flat
/// `w1|b1|w2|b2` layout, computed in parallel.
pub fn batch_lipschitz(flat: &[f64], h: usize, act: Activation) -> Result<Vec<f64>> {
    let ppd = 3 * h + 1;
    if h == 0 || flat.len() % ppd != 0 {
        return Err(ElfError::Dimension(format!(
            "{} values do not split into networks of {ppd} parameters",
            flat.len()
        )));
    }
    Ok(flat
        .par_chunks(ppd)
        .map(|p| ElfRef::from_flat_unchecked(p, h).lipschitz(act).constant)
        .collect())
}

/// `scale·g` with `scale = kappa / max(kappa, L)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedElf {
    pub params: ElfParams,
    pub scale: f64,
    pub activation: Activation,
}

impl NormalizedElf {
    pub fn forward(&self, x: f64) -> f64 {
        self.scale * self.params.view().forward(x, self.activation)
    }

    pub fn dx(&self, x: f64) -> f64 {
        self.scale * self.params.view().dx(x, self.activation)
    }

    /// The equivalent plain network with the scale folded into the output layer.
    pub fn folded(&self) -> ElfParams {
        self.params.scaled(self.scale)
    }
}

pub fn elf_normalized(p: &ElfParams, kappa: f64) -> Result<(NormalizedElf, f64)> {
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(ElfError::Config(format!("kappa must lie in (0, 1], got {kappa}")));
    }
    let lip = elf_lipschitz(p).constant;
    let scale = normalization_scale(lip, kappa);
    Ok((
        NormalizedElf {
            params: p.clone(),
            scale,
            activation: Activation::Felu,
        },
        scale,
    ))
}
