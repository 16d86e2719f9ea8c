use std::f64::consts::{FRAC_1_SQRT_2, PI};

use elf_core::{checkerboard_log_density, gen_checkerboard, gen_eight_gaussians};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn eight_gaussians_mean_is_zero() {
    let n = 100_000;
    let x = gen_eight_gaussians(n, 11);
    // per-coordinate variance: centre radius²/2 + noise², all over 2
    let sd = ((2.0 + 0.25) / 2.0f64).sqrt();
    for m in x.col_means() {
        assert!(m.abs() < 3.0 * sd / (n as f64).sqrt(), "{m}");
    }
}

#[test]
fn eight_gaussians_component_spread() {
    let n = 100_000;
    let x = gen_eight_gaussians(n, 12);
    // per coordinate, the centres contribute mean c² = r²/2 = 1 to the
    // second moment and the noise contributes σ²
    let target = 0.5 * FRAC_1_SQRT_2;
    for c in 0..2 {
        let m2 = (0..n).map(|b| x.at(b, c).powi(2)).sum::<f64>() / n as f64;
        let sd = (m2 - 1.0).sqrt();
        assert!((sd / target - 1.0).abs() < 0.05, "coordinate {c}: {sd}");
    }
    // mass splits evenly between the eight angular sectors
    let mut counts = [0usize; 8];
    for b in 0..n {
        let a = x.at(b, 1).atan2(x.at(b, 0));
        counts[((a / (PI / 4.0)).round() as i64).rem_euclid(8) as usize] += 1;
    }
    for k in counts {
        assert!((k as f64 / n as f64 - 0.125).abs() < 0.01);
    }
}

#[test]
fn checkerboard_cells_are_uniform() {
    let n = 100_000;
    let x = gen_checkerboard(n, 13);
    let mut hist = std::collections::BTreeMap::new();
    for b in 0..n {
        let (u, v) = (x.at(b, 0), x.at(b, 1));
        assert!((-4.0..=4.0).contains(&u) && (-4.0..=4.0).contains(&v));
        *hist.entry(((u / 2.0).floor() as i64, (v / 2.0).floor() as i64)).or_insert(0usize) += 1;
    }
    assert_eq!(hist.len(), 8, "{hist:?}");
    let expected = n as f64 / 8.0;
    let chi2: f64 = hist.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(7.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi² {chi2}, p {p}");
}

#[test]
fn checkerboard_true_log_likelihood() {
    let x = gen_checkerboard(10_000, 14);
    let ll: f64 = (0..x.rows()).map(|b| checkerboard_log_density([x.at(b, 0), x.at(b, 1)])).sum::<f64>() / 10_000.0;
    assert!((ll + 32f64.ln()).abs() < 1e-12);
    assert!((ll + 3.4657).abs() < 1e-4);
}
