use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use elf_core::verify::{check_model, complexity_bench, construction_suite, OracleReport};
use elf_core::{
    gen_checkerboard, gen_eight_gaussians, load_csv, train, Activation, BatchSource, ClipMode, DatasetKind,
    DatasetSpec, ElfError, EpochSampler, FixedPointConfig, FlowStack, LrSchedule, StackConfig, SyntheticStream,
    Tensor, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::args::{parse_range, BenchArgs, CheckArgs, EvalArgs, FpArgs, GridArgs, SampleArgs, TrainArgs};
use crate::checkpoint::{DataInfo, Model};
use crate::error::CliError;

pub const DEFAULT_KAPPA: f64 = 0.99;
pub const DEFAULT_EVAL_POINTS: usize = 10_000;

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Io { path: path.to_path_buf(), source: e }
}

/// Seed for the `k`-th synthetic split of a dataset seeded with `seed`.
/// Split 0 is the training stream itself.
pub fn split_seed(seed: u64, k: u64) -> u64 {
    seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn metrics_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".metrics.jsonl");
    PathBuf::from(s)
}

pub fn summary_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".summary.json");
    PathBuf::from(s)
}

/// Fully resolved training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub data: DatasetSpec,
    pub stack: StackConfig,
    pub train: TrainConfig,
    pub eval_points: usize,
    pub out: PathBuf,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Merges flags over the optional config file over defaults.
pub fn resolve_train(flags: TrainArgs) -> CliResult<TrainPlan> {
    let file = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            toml::from_str::<TrainArgs>(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => TrainArgs::default(),
    };
    macro_rules! pick {
        ($f:ident) => {
            flags.$f.or(file.$f)
        };
    }
    let out = pick!(out).ok_or_else(|| usage("--out is required"))?;
    let seed = pick!(seed).unwrap_or(0);
    let csv = pick!(csv);
    let kind = match (pick!(dataset), &csv) {
        (Some(name), _) => name.parse::<DatasetKind>().map_err(|e| usage(e.to_string()))?,
        (None, Some(_)) => DatasetKind::Csv,
        (None, None) => return Err(usage("--dataset or --csv is required")),
    };
    let mut data = match (kind, csv) {
        (DatasetKind::Csv, Some(path)) => DatasetSpec::csv(path, seed),
        (DatasetKind::Csv, None) => return Err(usage("--dataset csv needs --csv FILE")),
        (k, Some(_)) => return Err(usage(format!("--csv cannot be combined with --dataset {k}"))),
        (k, None) => DatasetSpec::synthetic(k, seed),
    };
    if let Some(split) = pick!(split) {
        data.split = split
            .try_into()
            .map_err(|_| usage("--split needs three comma-separated fractions"))?;
    }
    if flags.no_standardize || file.no_standardize {
        data.standardize = false;
    }
    data.validate().map_err(|e| usage(e.to_string()))?;

    let paper_faithful = flags.paper_faithful || file.paper_faithful;
    let kappa = match (paper_faithful, pick!(kappa)) {
        (true, Some(k)) if k != 1.0 => return Err(usage("--paper-faithful fixes kappa at 1")),
        (true, _) => 1.0,
        (false, k) => k.unwrap_or(DEFAULT_KAPPA),
    };
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(usage(format!("kappa must lie in (0, 1], got {kappa}")));
    }
    let activation = match pick!(activation) {
        Some(a) => a.parse::<Activation>().map_err(|e| usage(e.to_string()))?,
        None => Activation::Felu,
    };
    let elf_hidden = pick!(elf_hidden).unwrap_or(64);
    let flows = pick!(flows).unwrap_or(1);
    if elf_hidden == 0 {
        return Err(usage("--elf-hidden must be positive"));
    }
    let stack = StackConfig {
        dims: 0,
        flows,
        elf_hidden,
        hypernet_hidden: pick!(hypernet_hidden).unwrap_or_else(|| vec![128; 4]),
        kappa,
        activation,
        detach_lipschitz: flags.detach_lipschitz || file.detach_lipschitz,
    };

    let defaults = TrainConfig::default();
    let lr_schedule = match pick!(lr_schedule) {
        Some(s) => s.parse::<LrSchedule>().map_err(|e| usage(e.to_string()))?,
        None => defaults.lr_schedule,
    };
    let clip_mode = match pick!(clip_mode) {
        Some(s) => s.parse::<ClipMode>().map_err(|e| usage(e.to_string()))?,
        None => defaults.clip_mode,
    };
    let grad_clip = match pick!(grad_clip) {
        Some(c) if c == 0.0 => None,
        Some(c) => Some(c),
        None => defaults.grad_clip,
    };
    let train = TrainConfig {
        steps: pick!(steps).unwrap_or(defaults.steps),
        batch_size: pick!(batch).unwrap_or(defaults.batch_size),
        lr: pick!(lr).unwrap_or(defaults.lr),
        lr_schedule,
        grad_clip,
        clip_mode,
        weight_decay: pick!(weight_decay).unwrap_or(0.0),
        seed,
        polyak_decay: pick!(polyak),
        early_stop: pick!(early_stop),
        eval_every: pick!(eval_every),
        metrics_path: Some(metrics_path(&out)),
    };
    train.validate().map_err(|e| usage(e.to_string()))?;
    Ok(TrainPlan {
        data,
        stack,
        train,
        eval_points: pick!(eval_points).unwrap_or(DEFAULT_EVAL_POINTS).max(1),
        out,
    })
}

fn dataset_label(spec: &DatasetSpec) -> String {
    match &spec.path {
        Some(p) => format!("csv:{}", p.display()),
        None => spec.kind.name().to_string(),
    }
}

/// Rebuilds the dataset spec a model was trained on.
fn dataset_spec(info: &DataInfo, standardize: bool) -> CliResult<DatasetSpec> {
    let mut spec = match info.dataset.strip_prefix("csv:") {
        Some(path) => DatasetSpec::csv(path, info.data_seed),
        None => DatasetSpec::synthetic(
            info.dataset.parse().map_err(|e: ElfError| CliError::Checkpoint(e.to_string()))?,
            info.data_seed,
        ),
    };
    spec.split = info.split;
    spec.standardize = standardize;
    Ok(spec)
}

fn synthetic(kind: DatasetKind, n: usize, seed: u64) -> Tensor {
    match kind {
        DatasetKind::EightGaussians => gen_eight_gaussians(n, seed),
        _ => gen_checkerboard(n, seed),
    }
}

/// Train, validation and test data in original units.
fn eval_splits(spec: &DatasetSpec, n: usize) -> CliResult<Vec<(&'static str, Tensor)>> {
    if spec.kind.is_synthetic() {
        return Ok(["train", "val", "test"]
            .into_iter()
            .zip(0..)
            .map(|(name, k)| (name, synthetic(spec.kind, n, split_seed(spec.seed, k))))
            .collect());
    }
    let raw = DatasetSpec {
        standardize: false,
        ..spec.clone()
    };
    let path = raw.path.clone().expect("csv spec has a path");
    let s = load_csv(&path, &raw)?;
    Ok(vec![("train", s.train), ("val", s.val), ("test", s.test)])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitStats {
    pub split: String,
    pub n: usize,
    pub mean_ll: f64,
    pub std_ll: f64,
}

pub fn split_stats(model: &Model, name: &str, x: &Tensor) -> CliResult<SplitStats> {
    let ll = log_density(model, x)?;
    let n = ll.len();
    let mean = ll.iter().sum::<f64>() / n.max(1) as f64;
    let var = ll.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
    Ok(SplitStats {
        split: name.to_string(),
        n,
        mean_ll: mean,
        std_ll: var.sqrt(),
    })
}

fn print_stats(stats: &[SplitStats]) {
    for s in stats {
        println!("{:<5} mean log-likelihood {:.6} ± {:.6} (n = {})", s.split, s.mean_ll, s.std_ll, s.n);
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    steps_run: usize,
    aborted: Option<String>,
    best_val_nll: Option<f64>,
    splits: &'a [SplitStats],
}

pub fn cmd_train(flags: TrainArgs) -> CliResult<()> {
    let plan = resolve_train(flags)?;
    let mut config = plan.stack.clone();
    let seed = plan.train.seed;

    let (mut source, validation, standardizer): (Box<dyn BatchSource>, Tensor, _) = if plan.data.kind.is_synthetic() {
        (
            Box::new(SyntheticStream::new(plan.data.kind, split_seed(seed, 0))?),
            synthetic(plan.data.kind, plan.eval_points, split_seed(seed, 1)),
            None,
        )
    } else {
        let path = plan.data.path.clone().expect("csv spec has a path");
        let s = load_csv(&path, &plan.data)?;
        let std = plan.data.standardize.then_some(s.standardizer);
        (Box::new(EpochSampler::new(s.train, seed)), s.val, std)
    };
    config.dims = source.dims();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stack = FlowStack::build(&config, &mut rng)?;
    eprintln!(
        "training {} flow(s), H = {}, {} parameters, {} steps on {}",
        config.flows,
        config.elf_hidden,
        stack.num_params(),
        plan.train.steps,
        dataset_label(&plan.data)
    );
    let outcome = train(stack, source.as_mut(), Some(&validation), &plan.train)?;
    let model = Model {
        config,
        stack: outcome.stack,
        standardizer,
        data: DataInfo {
            dataset: dataset_label(&plan.data),
            data_seed: seed,
            split: plan.data.split,
        },
        seed,
        step: outcome.steps_run as u64,
    };
    model.to_checkpoint().save(&plan.out)?;
    if let Some(abort) = outcome.aborted {
        return Err(CliError::Aborted {
            step: abort.step,
            reason: abort.error.to_string(),
            checkpoint: plan.out,
        });
    }

    let splits = eval_splits(&plan.data, plan.eval_points)?
        .iter()
        .map(|(name, x)| split_stats(&model, name, x))
        .collect::<CliResult<Vec<_>>>()?;
    print_stats(&splits);
    let summary = Summary {
        steps_run: outcome.steps_run,
        aborted: None,
        best_val_nll: outcome.best_val_loss,
        splits: &splits,
    };
    let path = summary_path(&plan.out);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(())
}

pub fn load_model(path: &Path) -> CliResult<Model> {
    Model::from_checkpoint(&crate::checkpoint::Checkpoint::load(path)?)
}

/// Reads a headerless or headed numeric CSV file in full.
fn read_table(path: &Path, dims: usize) -> CliResult<Tensor> {
    let spec = DatasetSpec {
        split: [1.0, 0.0, 0.0],
        standardize: false,
        ..DatasetSpec::csv(path, 0)
    };
    let x = load_csv(path, &spec)?.train;
    if x.cols() != dims {
        return Err(ElfError::Dimension(format!("{} has {} columns, the model expects {dims}", path.display(), x.cols())).into());
    }
    Ok(x)
}

pub fn cmd_eval(args: EvalArgs) -> CliResult<Vec<SplitStats>> {
    let model = load_model(&args.model)?;
    let splits = match &args.data {
        Some(path) => vec![("data", read_table(path, model.config.dims)?)],
        None => eval_splits(&dataset_spec(&model.data, false)?, args.n)?,
    };
    let stats = splits
        .iter()
        .map(|(name, x)| split_stats(&model, name, x))
        .collect::<CliResult<Vec<_>>>()?;
    print_stats(&stats);
    Ok(stats)
}

fn fixed_point(fp: &FpArgs) -> CliResult<FixedPointConfig> {
    if !(fp.fp_tol > 0.0) || fp.fp_max_iters == 0 {
        return Err(usage("--fp-tol and --fp-max-iters must be positive"));
    }
    Ok(FixedPointConfig {
        tol: fp.fp_tol,
        max_iters: fp.fp_max_iters,
    })
}

fn output(path: &Option<PathBuf>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_err(p))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_rows(out: &mut dyn Write, header: &str, x: &Tensor, extra: Option<&[f64]>) -> io::Result<()> {
    writeln!(out, "{header}")?;
    for r in 0..x.rows() {
        let mut line = x.row(r).iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",");
        if let Some(e) = extra {
            line.push_str(&format!(",{}", e[r]));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()
}

pub fn cmd_sample(args: SampleArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let fp = fixed_point(&args.fp)?;
    let (x, stats) = model.stack.sample(args.n, args.seed, fp)?;
    let x = match &model.standardizer {
        Some(s) => s.invert(&x),
        None => x,
    };
    for (i, m) in stats.mean_iterations.iter().enumerate() {
        eprintln!("elf layer {i}: mean fixed-point iterations {m:.2}");
    }
    let header = (1..=model.config.dims).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
    let mut out = output(&args.out)?;
    write_rows(out.as_mut(), &header, &x, None).map_err(|e| CliError::Io { path: args.out.clone().unwrap_or_default(), source: e })
}

pub fn cmd_density_grid(args: GridArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    if model.config.dims != 2 {
        return Err(CliError::Unsupported(format!(
            "density grids need a 2-dim model, this one has {} dims",
            model.config.dims
        )));
    }
    let range = parse_range(&args.range).map_err(usage)?;
    if args.resolution == 0 {
        return Err(usage("--resolution must be positive"));
    }
    let grid = elf_core::verify::density_grid_points(range, args.resolution);
    let ll = log_density(&model, &grid)?;
    let mut out = output(&args.out)?;
    write_rows(out.as_mut(), "x1,x2,log_density", &grid, Some(&ll))
        .map_err(|e| CliError::Io { path: args.out.clone().unwrap_or_default(), source: e })
}

fn log_density(model: &Model, x: &Tensor) -> CliResult<Vec<f64>> {
    let mut ll = Vec::with_capacity(x.rows());
    for start in (0..x.rows()).step_by(8192) {
        ll.extend(model.log_prob(&x.slice_rows(start, (start + 8192).min(x.rows())))?);
    }
    Ok(ll)
}

/// Randomly initialized stack with every parameter perturbed by `N(0, sd²)`
/// so the ELF layers are far from the identity.
pub fn random_stack(dims: usize, seed: u64, sd: f64) -> CliResult<FlowStack> {
    let config = StackConfig {
        dims,
        flows: 2,
        elf_hidden: 8,
        hypernet_hidden: vec![16, 16],
        kappa: DEFAULT_KAPPA,
        activation: Activation::Felu,
        detach_lipschitz: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stack = FlowStack::build(&config, &mut rng)?;
    for p in stack.params_mut() {
        for v in p.data_mut() {
            *v += sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(stack)
}

pub fn cmd_check(args: CheckArgs) -> CliResult<Vec<OracleReport>> {
    let fp = fixed_point(&args.fp)?;
    let mut reports = construction_suite()?;
    let mut run = |label: &str, stack: &FlowStack| -> CliResult<()> {
        for mut r in check_model(stack, args.points.max(1), 1.0, args.seed, fp)? {
            r.name = format!("{label}-{}", r.name);
            reports.push(r);
        }
        Ok(())
    };
    if let Some(path) = &args.model {
        run("model", &load_model(path)?.stack)?;
    }
    if args.random {
        if args.dims == 0 {
            return Err(usage("--dims must be positive"));
        }
        run("random", &random_stack(args.dims, args.seed, 0.05)?)?;
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for r in &reports {
        let line = serde_json::to_string(r).expect("report serializes");
        writeln!(out, "{line}").map_err(io_err(Path::new("<stdout>")))?;
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    eprintln!("{} of {} checks passed", reports.len() - failed, reports.len());
    if failed > 0 {
        return Err(CliError::ChecksFailed(failed, reports.len()));
    }
    Ok(reports)
}

pub fn cmd_bench(args: BenchArgs) -> CliResult<()> {
    let report = complexity_bench(&args.hidden, args.batch, args.reps, &args.batch_sizes, args.batch_hidden)?;
    println!("threads {}", report.threads);
    println!("{:>8} {:>8} {:>14}", "hidden", "batch", "median_ms");
    for row in report.hidden_sweep.iter().chain(&report.batch_sweep) {
        println!("{:>8} {:>8} {:>14.4}", row.hidden, row.batch, row.median_secs * 1e3);
    }
    println!("quadratic fit in hidden size: R² = {:.4}", report.quadratic_r2);
    println!("linear fit in batch size:     R² = {:.4}", report.linear_r2);
    Ok(())
}
