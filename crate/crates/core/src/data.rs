//! Toy 2-D generators and CSV tabular ingestion.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ElfError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    EightGaussians,
    Checkerboard,
    Csv,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::EightGaussians => "eight-gaussians",
            DatasetKind::Checkerboard => "checkerboard",
            DatasetKind::Csv => "csv",
        }
    }

    pub fn is_synthetic(self) -> bool {
        self != DatasetKind::Csv
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = ElfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eight-gaussians" | "8gaussians" => Ok(DatasetKind::EightGaussians),
            "checkerboard" => Ok(DatasetKind::Checkerboard),
            "csv" => Ok(DatasetKind::Csv),
            other => Err(ElfError::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub path: Option<PathBuf>,
    pub standardize: bool,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub seed: u64,
}

impl DatasetSpec {
    pub fn synthetic(kind: DatasetKind, seed: u64) -> Self {
        Self {
            kind,
            path: None,
            standardize: false,
            split: [0.8, 0.1, 0.1],
            seed,
        }
    }

    pub fn csv(path: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            kind: DatasetKind::Csv,
            path: Some(path.into()),
            standardize: true,
            split: [0.8, 0.1, 0.1],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.split.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(ElfError::Config(format!(
                "split fractions {:?} must be in [0, 1] and sum to 1",
                self.split
            )));
        }
        if self.kind == DatasetKind::Csv && self.path.is_none() {
            return Err(ElfError::Config("csv dataset needs a path".into()));
        }
        Ok(())
    }
}

fn eight_gaussians_into<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let k = rng.random_range(0..8) as f64;
        let (s, c) = (PI * k / 4.0).sin_cos();
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        data.push((2.0 * c + 0.5 * e0) * FRAC_1_SQRT_2);
        data.push((2.0 * s + 0.5 * e1) * FRAC_1_SQRT_2);
    }
    Tensor::from_vec(&[n, 2], data).expect("2n values")
}

fn checkerboard_into<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        // 4×4 board of 2×2 cells on [−4, 4]²; x2 lands in one of two bands
        // chosen so occupied cells alternate with the column parity
        let x1: f64 = rng.random::<f64>() * 4.0 - 2.0;
        let band = if rng.random::<bool>() { 2.0 } else { 0.0 };
        let x2 = rng.random::<f64>() - band + x1.floor().rem_euclid(2.0);
        data.push(2.0 * x1);
        data.push(2.0 * x2);
    }
    Tensor::from_vec(&[n, 2], data).expect("2n values")
}

/// Mixture of eight Gaussians: centre `2·(cos πk/4, sin πk/4)`, noise `0.5`,
/// everything divided by `√2`.
pub fn gen_eight_gaussians(n: usize, seed: u64) -> Tensor {
    eight_gaussians_into(&mut ChaCha8Rng::seed_from_u64(seed), n)
}

/// Uniform density on the occupied cells of a checkerboard over `[−4, 4]²`
/// (occupied area 32, so the true log-likelihood is `−ln 32`).
pub fn gen_checkerboard(n: usize, seed: u64) -> Tensor {
    checkerboard_into(&mut ChaCha8Rng::seed_from_u64(seed), n)
}

/// True log-density of the checkerboard generator at `x`.
pub fn checkerboard_log_density(x: [f64; 2]) -> f64 {
    let (u, v) = (x[0] / 2.0, x[1] / 2.0);
    if !(-2.0..2.0).contains(&u) || !(-2.0..2.0).contains(&v) {
        return f64::NEG_INFINITY;
    }
    if (u.floor() + v.floor()).rem_euclid(2.0) == 0.0 {
        -(32.0f64).ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Source of training batches.
pub trait BatchSource {
    fn dims(&self) -> usize;
    fn next_batch(&mut self, n: usize) -> Tensor;
    /// Steps per pass over the data, if the source is finite.
    fn epoch_len(&self, batch_size: usize) -> Option<usize>;
}

/// Endless stream of fresh synthetic samples.
pub struct SyntheticStream {
    kind: DatasetKind,
    rng: ChaCha8Rng,
}

impl SyntheticStream {
    pub fn new(kind: DatasetKind, seed: u64) -> Result<Self> {
        if !kind.is_synthetic() {
            return Err(ElfError::Config("csv data is not a synthetic stream".into()));
        }
        Ok(Self {
            kind,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl BatchSource for SyntheticStream {
    fn dims(&self) -> usize {
        2
    }

    fn next_batch(&mut self, n: usize) -> Tensor {
        match self.kind {
            DatasetKind::EightGaussians => eight_gaussians_into(&mut self.rng, n),
            _ => checkerboard_into(&mut self.rng, n),
        }
    }

    fn epoch_len(&self, _batch_size: usize) -> Option<usize> {
        None
    }
}

/// Minibatches from a fixed table, reshuffled with a seeded permutation at
/// the start of each epoch.
pub struct EpochSampler {
    data: Tensor,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(data: Tensor, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.rows()).collect();
        order.shuffle(&mut rng);
        Self {
            data,
            order,
            pos: 0,
            rng,
        }
    }
}

impl BatchSource for EpochSampler {
    fn dims(&self) -> usize {
        self.data.cols()
    }

    /// Returns a short final batch at the end of an epoch.
    fn next_batch(&mut self, n: usize) -> Tensor {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + n).min(self.order.len());
        let batch = self.data.select_rows(&self.order[self.pos..end]);
        self.pos = end;
        batch
    }

    fn epoch_len(&self, batch_size: usize) -> Option<usize> {
        Some(self.data.rows().div_ceil(batch_size))
    }
}

/// Per-dimension affine standardization fitted on a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &Tensor) -> Result<Self> {
        let mean = train.col_means();
        let std = train.col_stds();
        if let Some(c) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(ElfError::Data(format!("column {c} has zero variance")));
        }
        Ok(Self { mean, std })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for b in 0..out.rows() {
            for ((v, m), s) in out.row_mut(b).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn invert(&self, z: &Tensor) -> Tensor {
        let mut out = z.clone();
        for b in 0..out.rows() {
            for ((v, m), s) in out.row_mut(b).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }

    /// Add to a standardized-space log-density to get original units:
    /// `−Σ_i ln std_i`.
    pub fn log_density_correction(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }
}

#[derive(Clone, Debug)]
pub struct TabularSplits {
    pub train: Tensor,
    pub val: Tensor,
    pub test: Tensor,
    pub standardizer: Standardizer,
}

fn parse_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let csv_err = |source| ElfError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let mut rows = Vec::new();
    let mut arity = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            // a non-numeric first row is a header
            Err(_) if line == 0 => continue,
            Err(_) => {
                let (col, cell) = record
                    .iter()
                    .enumerate()
                    .find(|(_, c)| c.parse::<f64>().is_err())
                    .expect("some cell failed to parse");
                return Err(ElfError::Data(format!(
                    "{}: line {}: column {col}: `{cell}` is not a number",
                    path.display(),
                    line + 1
                )));
            }
        };
        if let Some((c, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(ElfError::Data(format!(
                "{}: line {}: column {c}: non-finite value {v}",
                path.display(),
                line + 1
            )));
        }
        match arity {
            None => arity = Some(values.len()),
            Some(a) if a != values.len() => {
                return Err(ElfError::Data(format!(
                    "{}: line {}: expected {a} columns, found {}",
                    path.display(),
                    line + 1,
                    values.len()
                )))
            }
            _ => {}
        }
        rows.push(values);
    }
    Ok(rows)
}

/// Splits the rows of `data` by `split` after a seeded shuffle.
pub fn split_rows(data: &Tensor, split: [f64; 3], seed: u64) -> (Tensor, Tensor, Tensor) {
    let n = data.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (split[0] * n as f64).round() as usize;
    let n_val = ((split[1] * n as f64).round() as usize).min(n - n_train);
    (
        data.select_rows(&order[..n_train]),
        data.select_rows(&order[n_train..n_train + n_val]),
        data.select_rows(&order[n_train + n_val..]),
    )
}

/// Reads a numeric CSV (optional header row), shuffles and splits it, and
/// standardizes every split with statistics from the training split.
pub fn load_csv(path: &Path, spec: &DatasetSpec) -> Result<TabularSplits> {
    spec.validate()?;
    let rows = parse_rows(path)?;
    if rows.len() < 10 {
        return Err(ElfError::Data(format!(
            "{}: need at least 10 data rows, found {}",
            path.display(),
            rows.len()
        )));
    }
    let data = Tensor::from_rows(&rows)?;
    let (train, val, test) = split_rows(&data, spec.split, spec.seed);
    let standardizer = if spec.standardize {
        Standardizer::fit(&train)?
    } else {
        Standardizer::identity(data.cols())
    };
    Ok(TabularSplits {
        train: standardizer.apply(&train),
        val: standardizer.apply(&val),
        test: standardizer.apply(&test),
        standardizer,
    })
}
