use elf_core::train::nll_loss;
use elf_core::{
    train, Activation, BatchSource, FlowStack, LrSchedule, StackConfig, SyntheticStream, Tensor, TrainConfig,
};
use elf_core::DatasetKind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn stack(h: usize, seed: u64) -> FlowStack {
    let config = StackConfig {
        dims: 2,
        flows: 1,
        elf_hidden: h,
        hypernet_hidden: vec![32, 32],
        kappa: 0.99,
        activation: Activation::Felu,
        detach_lipschitz: false,
    };
    FlowStack::build(&config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn short(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 64,
        ..TrainConfig::default()
    }
}

fn gaussians(seed: u64) -> SyntheticStream {
    SyntheticStream::new(DatasetKind::EightGaussians, seed).unwrap()
}

#[test]
fn identity_loss_at_origin_is_log_two_pi() {
    let loss = nll_loss(&stack(4, 0), &Tensor::zeros(&[5, 2])).unwrap();
    assert!((loss - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    assert!((loss - 1.837877).abs() < 1e-6);
}

#[test]
fn loss_decreases_in_first_hundred_steps() {
    let out = train(stack(32, 1), &mut gaussians(1), None, &short(100)).unwrap();
    assert!(out.aborted.is_none());
    let mean = |r: &[elf_core::StepRecord]| r.iter().map(|s| s.loss).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&out.records[..10]), mean(&out.records[90..]));
    assert!(last < first - 0.1, "{first} -> {last}");
}

#[test]
fn monitoring_values_are_sane() {
    let out = train(stack(16, 2), &mut gaussians(2), None, &short(60)).unwrap();
    for r in &out.records {
        assert!((0.0..=1.0).contains(&r.frac_normalized));
        assert!(r.mean_lip.is_finite() && r.loss.is_finite());
    }
}

#[test]
fn training_is_deterministic() {
    let run = || train(stack(8, 3), &mut gaussians(3), None, &short(30)).unwrap().stack;
    let (a, b) = (run(), run());
    for (x, y) in a.params().iter().zip(b.params()) {
        assert!(x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

#[test]
fn halving_schedule_in_records() {
    let config = TrainConfig {
        lr_schedule: LrSchedule::HalveEvery(5),
        ..short(11)
    };
    let out = train(stack(4, 4), &mut gaussians(4), None, &config).unwrap();
    let lrs: Vec<f64> = out.records.iter().map(|r| r.lr).collect();
    assert_eq!(lrs[4], 2e-3);
    assert_eq!(lrs[5], 1e-3);
    assert_eq!(lrs[10], 5e-4);
}

/// Clean batches until `bad_from`, then a NaN in every batch.
struct Poisoned {
    inner: SyntheticStream,
    calls: usize,
    bad_from: usize,
}

impl BatchSource for Poisoned {
    fn dims(&self) -> usize {
        2
    }

    fn next_batch(&mut self, n: usize) -> Tensor {
        let mut b = self.inner.next_batch(n);
        if self.calls >= self.bad_from {
            b.set(0, 1, f64::NAN);
        }
        self.calls += 1;
        b
    }

    fn epoch_len(&self, _: usize) -> Option<usize> {
        None
    }
}

#[test]
fn nan_loss_aborts_with_last_good_weights() {
    let mut src = Poisoned {
        inner: gaussians(5),
        calls: 0,
        bad_from: 7,
    };
    let out = train(stack(8, 5), &mut src, None, &short(50)).unwrap();
    let abort = out.aborted.expect("aborted");
    assert_eq!(abort.step, 7);
    assert_eq!(out.steps_run, 7);
    assert!(abort.error.to_string().contains("non-finite"));

    let clean = train(stack(8, 5), &mut gaussians(5), None, &short(7)).unwrap().stack;
    assert_eq!(out.stack, clean);
}

#[test]
fn early_stopping_keeps_best_polyak_weights() {
    let val = elf_core::gen_eight_gaussians(500, 99);
    let config = TrainConfig {
        early_stop: Some(2),
        eval_every: Some(5),
        polyak_decay: Some(0.9),
        lr: 5e-2,
        ..short(400)
    };
    let out = train(stack(8, 6), &mut gaussians(6), Some(&val), &config).unwrap();
    let best = out.best_val_loss.unwrap();
    let got = nll_loss(&out.stack, &val).unwrap();
    assert!((got - best).abs() < 1e-9, "{got} vs {best}");
    let vals: Vec<f64> = out.records.iter().filter_map(|r| r.val_loss).collect();
    assert!(vals.iter().all(|&v| v >= best));
}

#[test]
fn early_stopping_needs_validation() {
    let config = TrainConfig {
        early_stop: Some(2),
        ..short(5)
    };
    assert!(train(stack(4, 7), &mut gaussians(7), None, &config).is_err());
}
