use elf_core::{
    Activation, ActNorm, ElfArLayer, ElfError, FixedPointConfig, FlowStack, GradTape, Layer,
    StackConfig, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], sd: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

fn config(d: usize, flows: usize, h: usize, hidden: Vec<usize>) -> StackConfig {
    StackConfig {
        dims: d,
        flows,
        elf_hidden: h,
        hypernet_hidden: hidden,
        kappa: 0.99,
        activation: Activation::Felu,
        detach_lipschitz: false,
    }
}

/// Adds noise to every parameter; output biases get extra spread so some
/// networks exceed `kappa` and are normalized.
fn perturb(stack: &mut FlowStack, rng: &mut ChaCha8Rng, sd: f64) {
    for p in stack.params_mut() {
        for v in p.data_mut() {
            *v += sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn random_stack(d: usize, flows: usize, h: usize, hidden: Vec<usize>, seed: u64) -> FlowStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stack = FlowStack::build(&config(d, flows, h, hidden), &mut rng).unwrap();
    stack.initialize(&normal(&mut rng, &[64, d], 1.5)).unwrap();
    perturb(&mut stack, &mut rng, 0.6);
    stack
}

fn nll(stack: &FlowStack, x: &Tensor) -> f64 {
    let lp = stack.log_prob(x).unwrap();
    -lp.iter().sum::<f64>() / lp.len() as f64
}

fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let d = x.len();
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        for i in 0..d {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        let piv = a[c][c];
        acc += piv.abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / piv;
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    acc
}

#[test]
fn fresh_layer_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = ElfArLayer::new(&config(3, 1, 4, vec![16, 16]).layer_config(), &mut rng).unwrap();
    let x = normal(&mut rng, &[20, 3], 2.0);
    let (y, ld) = layer.forward(&x).unwrap();
    assert_eq!(y, x);
    assert!(ld.iter().all(|&v| v == 0.0));
}

#[test]
fn empty_stack_at_origin() {
    let stack = FlowStack::new(2);
    let lp = stack.log_prob(&Tensor::zeros(&[1, 2])).unwrap();
    assert!((lp[0] + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
}

#[test]
fn single_actnorm_log_prob() {
    let mut stack = FlowStack::new(1);
    let a = ActNorm::from_params(Tensor::vector(vec![2f64.ln()]), Tensor::vector(vec![0.0]), true).unwrap();
    stack.push(Layer::ActNorm(a)).unwrap();
    // z = 2·0.5 = 1, log p = log N(1) + ln 2
    let lp = stack.log_prob(&Tensor::from_rows(&[vec![0.5]]).unwrap()).unwrap();
    let expected = -0.5 - 0.5 * (2.0 * std::f64::consts::PI).ln() + 2f64.ln();
    assert!((lp[0] - expected).abs() < 1e-12);
}

#[test]
fn jacobian_is_lower_triangular() {
    let stack = random_stack(4, 2, 5, vec![24, 24], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let x: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let jac = fd_jacobian(|v| stack.forward(&Tensor::from_rows(&[v.to_vec()]).unwrap()).unwrap().z.into_vec(), &x, 1e-5);
        for i in 0..4 {
            for j in i + 1..4 {
                assert!(jac[i][j].abs() < 1e-8, "J[{i}][{j}] = {}", jac[i][j]);
            }
        }
    }
}

#[test]
fn logdet_matches_fd_jacobian() {
    let mut worst = 0.0f64;
    for (k, d) in [2, 3, 6].into_iter().enumerate() {
        for m in 0..4 {
            let stack = random_stack(d, 2, 4, vec![32, 32], 100 * k as u64 + m);
            let mut rng = ChaCha8Rng::seed_from_u64(m + 7);
            let x = normal(&mut rng, &[3, d], 1.0);
            let out = stack.forward(&x).unwrap();
            for b in 0..3 {
                let jac = fd_jacobian(
                    |v| stack.forward(&Tensor::from_rows(&[v.to_vec()]).unwrap()).unwrap().z.into_vec(),
                    x.row(b),
                    1e-5,
                );
                let fd = log_abs_det(jac);
                let rel = (out.logdet[b] - fd).abs() / fd.abs().max(1.0);
                worst = worst.max(rel);
            }
        }
    }
    assert!(worst <= 1e-4, "worst rel err {worst}");
}

#[test]
fn full_gradient_matches_finite_differences() {
    let mut stack = random_stack(2, 2, 3, vec![8, 8], 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = normal(&mut rng, &[16, 2], 1.0);
    let mut tape = GradTape::new();
    let out = stack.forward_recorded(&x, &mut tape).unwrap();
    assert!(out.stats.frac_normalized > 0.0, "normalization path not exercised");
    let batch = x.rows() as f64;
    let mut gz = out.z.clone();
    gz.scale(1.0 / batch);
    let grads = stack.backward(&mut tape, &gz, &vec![-1.0 / batch; x.rows()]).unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let shapes: Vec<usize> = stack.params().iter().map(|p| p.len()).collect();
    for (pi, &n) in shapes.iter().enumerate() {
        for e in 0..n {
            let orig = stack.params()[pi].data()[e];
            stack.params_mut()[pi].data_mut()[e] = orig + h;
            let fp = nll(&stack, &x);
            stack.params_mut()[pi].data_mut()[e] = orig - h;
            let fm = nll(&stack, &x);
            stack.params_mut()[pi].data_mut()[e] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = grads.tensors[pi].data()[e];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(rel);
            assert!(rel <= 1e-5, "{}[{e}]: analytic {an} fd {fd}", grads.names[pi]);
        }
    }
    eprintln!("worst gradient rel err {worst:.2e}");
}

#[test]
fn masked_weights_get_zero_gradient() {
    let stack = random_stack(3, 1, 3, vec![12], 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = normal(&mut rng, &[8, 3], 1.0);
    let mut tape = GradTape::new();
    let out = stack.forward_recorded(&x, &mut tape).unwrap();
    let grads = stack.backward(&mut tape, &out.z, &vec![-1.0; 8]).unwrap();
    for layer in stack.elf_layers() {
        for (l, ml) in layer.hypernet().layers().iter().enumerate() {
            let g = grads.get(&format!("layer1.made.{l}.weight")).unwrap();
            for (gv, m) in g.data().iter().zip(ml.mask().data()) {
                if *m == 0.0 {
                    assert_eq!(*gv, 0.0);
                }
            }
        }
    }
}

#[test]
fn backward_without_forward_is_state_error() {
    let stack = random_stack(2, 1, 3, vec![8], 1);
    let err = stack.backward(&mut GradTape::new(), &Tensor::zeros(&[1, 2]), &[0.0]).unwrap_err();
    assert!(matches!(err, ElfError::State(_)));
}

#[test]
fn inverse_round_trip() {
    let stack = random_stack(3, 3, 6, vec![32, 32], 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = normal(&mut rng, &[200, 3], 1.0);
    let z = stack.forward(&x).unwrap().z;
    // heavily perturbed networks sit near kappa, so allow the slow geometric tail
    let fp = FixedPointConfig { tol: 1e-10, max_iters: 20_000 };
    let (back, stats) = stack.inverse(&z, fp).unwrap();
    assert!(back.max_abs_diff(&x) <= 1e-6, "{}", back.max_abs_diff(&x));
    assert_eq!(stats.mean_iterations.len(), 3);
}

#[test]
fn inverse_of_constant_residual() {
    // g ≡ 0.5 for every dimension: one-step inverse y − 0.5
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut layer = ElfArLayer::new(&config(2, 1, 2, vec![4]).layer_config(), &mut rng).unwrap();
    let out = layer.hypernet_mut().layers_mut().last_mut().unwrap();
    let ppd = 7;
    for t in 0..2 {
        out.bias.data_mut()[t * ppd + 6] = 0.5;
    }
    let y = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
    let (x, iters) = layer.invert(&y, 200, 1e-12).unwrap();
    assert!(x.max_abs_diff(&Tensor::from_rows(&[vec![0.5, -2.5]]).unwrap()) < 1e-12);
    assert!(iters[0] <= 2);
}

#[test]
fn inverse_reports_non_convergence() {
    let stack = random_stack(2, 1, 4, vec![16], 8);
    let z = Tensor::from_rows(&[vec![0.3, -0.2], vec![1.0, 2.0]]).unwrap();
    let err = stack.inverse(&z, FixedPointConfig { tol: 1e-15, max_iters: 1 }).unwrap_err();
    match err {
        ElfError::Convergence { failing, .. } => assert!(!failing.is_empty()),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn zero_variance_actnorm_names_dimension() {
    let mut stack = FlowStack::build(&config(2, 1, 2, vec![4]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let x = Tensor::from_rows(&[vec![1.0, 3.0], vec![2.0, 3.0]]).unwrap();
    let err = stack.initialize(&x).unwrap_err();
    assert!(matches!(err, ElfError::ZeroVariance { dim: 1 }), "{err}");
}
