use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::elf::batch_lipschitz;
use crate::error::{ElfError, Result};
use crate::felu::Activation;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingRow {
    pub hidden: usize,
    pub batch: usize,
    pub median_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub threads: usize,
    pub hidden_sweep: Vec<TimingRow>,
    /// R² of a degree-2 polynomial fit of time against `H`.
    pub quadratic_r2: f64,
    pub batch_sweep: Vec<TimingRow>,
    /// R² of a linear fit of time against batch size.
    pub linear_r2: f64,
}

/// R² of the least-squares polynomial of `degree` through `(xs, ys)`.
pub fn poly_fit_r2(xs: &[f64], ys: &[f64], degree: usize) -> f64 {
    let k = degree + 1;
    let mut ata = vec![vec![0.0; k + 1]; k];
    for (&x, &y) in xs.iter().zip(ys) {
        let pows: Vec<f64> = (0..k).map(|p| x.powi(p as i32)).collect();
        for r in 0..k {
            for c in 0..k {
                ata[r][c] += pows[r] * pows[c];
            }
            ata[r][k] += pows[r] * y;
        }
    }
    for c in 0..k {
        let p = (c..k).max_by(|&i, &j| ata[i][c].abs().total_cmp(&ata[j][c].abs())).unwrap_or(c);
        ata.swap(c, p);
        for r in 0..k {
            if r != c && ata[c][c] != 0.0 {
                let f = ata[r][c] / ata[c][c];
                for j in c..=k {
                    ata[r][j] -= f * ata[c][j];
                }
            }
        }
    }
    let coef: Vec<f64> = (0..k).map(|i| ata[i][k] / ata[i][i]).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let fit: f64 = coef.iter().enumerate().map(|(p, c)| c * x.powi(p as i32)).sum();
        ss_res += (y - fit).powi(2);
        ss_tot += (y - mean).powi(2);
    }
    if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    }
}

pub fn linear_fit_r2(xs: &[f64], ys: &[f64]) -> f64 {
    poly_fit_r2(xs, ys, 1)
}

fn time_batch(h: usize, batch: usize, reps: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let flat: Vec<f64> = (0..batch * (3 * h + 1)).map(|_| rng.sample(StandardNormal)).collect();
    let mut sink = batch_lipschitz(&flat, h, Activation::Felu)?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        sink = batch_lipschitz(&flat, h, Activation::Felu)?;
        times.push(t.elapsed().as_secs_f64());
    }
    std::hint::black_box(sink);
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Median wall time of batched Lipschitz computation over a sweep of hidden
/// sizes (fixed `batch`) and a sweep of batch sizes (fixed `batch_hidden`).
pub fn complexity_bench(
    hidden_sizes: &[usize],
    batch: usize,
    reps: usize,
    batch_sizes: &[usize],
    batch_hidden: usize,
) -> Result<ComplexityReport> {
    if hidden_sizes.len() < 3 || batch_sizes.len() < 2 || reps == 0 {
        return Err(ElfError::Config(
            "need at least 3 hidden sizes, 2 batch sizes and 1 repetition".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut hidden_sweep = Vec::new();
    for &h in hidden_sizes {
        hidden_sweep.push(TimingRow {
            hidden: h,
            batch,
            median_secs: time_batch(h, batch, reps, &mut rng)?,
        });
    }
    let mut batch_sweep = Vec::new();
    for &b in batch_sizes {
        batch_sweep.push(TimingRow {
            hidden: batch_hidden,
            batch: b,
            median_secs: time_batch(batch_hidden, b, reps, &mut rng)?,
        });
    }
    let fit = |rows: &[TimingRow], x: fn(&TimingRow) -> f64, degree| {
        let xs: Vec<f64> = rows.iter().map(x).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.median_secs).collect();
        poly_fit_r2(&xs, &ys, degree)
    };
    Ok(ComplexityReport {
        threads: rayon::current_num_threads(),
        quadratic_r2: fit(&hidden_sweep, |r| r.hidden as f64, 2),
        linear_r2: fit(&batch_sweep, |r| r.batch as f64, 1),
        hidden_sweep,
        batch_sweep,
    })
}
