//! Independent oracles and synthetic generators shared by integration tests.
#![allow(dead_code)]

use evgust::data::Samples;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos (g = 7, n = 9), independent of the crate's statrs path
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `−log ∫∫ N(y | μ, σ²) · N(μ | γ, σ²/ν) · InvGamma(σ² | α, β) dμ dσ²`,
/// integrated numerically over `s = ln σ²` and `μ`.
pub fn nig_nll_quadrature(gamma: f64, nu: f64, alpha: f64, beta: f64, y: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let log_norm_ig = alpha * beta.ln() - ln_gamma(alpha);
    let mode = (beta / alpha).ln();
    let (s_lo, s_hi) = (mode - 25.0, mode + 45.0 / alpha + 8.0);
    let outer = |s: f64| {
        let var = s.exp();
        // InvGamma density times the Jacobian dσ² = σ² ds
        let log_ig = log_norm_ig - (alpha + 1.0) * s - beta / var + s;
        let sd_mu = (var / nu).sqrt();
        let sd_y = var.sqrt();
        let lo = gamma.min(y) - 12.0 * sd_mu.max(sd_y);
        let hi = gamma.max(y) + 12.0 * sd_mu.max(sd_y);
        let inner = simpson(
            |mu| {
                let a = (y - mu) / sd_y;
                let b = (mu - gamma) / sd_mu;
                (-(0.5 * a * a) - 0.5 * b * b).exp() / (two_pi * sd_y * sd_mu)
            },
            lo,
            hi,
            600,
        );
        inner * log_ig.exp()
    };
    -simpson(outer, s_lo, s_hi, 3000).ln()
}

/// Kolmogorov–Smirnov statistic against U(0, 1) and its asymptotic p-value.
pub fn ks_uniform(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i as f64 + 1.0) / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (d, p.clamp(0.0, 1.0))
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va.sqrt() * vb.sqrt())
}

/// `y ~ N(sin 2x, (0.1 + |x|)²)`, `x ~ U(−1, 1)`. Returns samples and the true sd.
pub fn heteroscedastic(n: usize, seed: u64) -> (Samples, Vec<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let sd: Vec<f64> = x.iter().map(|v| 0.1 + v.abs()).collect();
    let y: Vec<f64> = x
        .iter()
        .zip(&sd)
        .map(|(v, s)| (2.0 * v).sin() + Normal::new(0.0, *s).unwrap().sample(&mut r))
        .collect();
    (
        Samples::new(
            Array2::from_shape_vec((n, 1), x).unwrap(),
            Array1::from(y),
            vec!["x".into()],
        )
        .unwrap(),
        sd,
    )
}

/// `y = x + N(0, noise²)`, `x ~ U(−2, 2)`.
pub fn linear_noisy(n: usize, noise: f64, seed: u64) -> Samples {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
    let nd = Normal::new(0.0, noise).unwrap();
    let y: Vec<f64> = x.iter().map(|v| v + nd.sample(&mut r)).collect();
    Samples::new(
        Array2::from_shape_vec((n, 1), x).unwrap(),
        Array1::from(y),
        vec!["x".into()],
    )
    .unwrap()
}

/// Calibrated Monte Carlo set: per-sample sd in [0.5, 3], obs ~ N(μ, sd²).
pub fn calibrated_draws(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = Vec::with_capacity(n);
    let mut sd = Vec::with_capacity(n);
    let mut obs = Vec::with_capacity(n);
    for _ in 0..n {
        let m = r.random_range(0.0..20.0);
        let s = r.random_range(0.5..3.0);
        let e: f64 = Normal::new(0.0, s).unwrap().sample(&mut r);
        mean.push(m);
        sd.push(s);
        obs.push(m + e);
    }
    (mean, sd, obs)
}

/// Random small network, batch and λ; returns the worst mismatch between
/// back-propagated and central-difference gradients of the full training
/// loss, as `|a − b| / (max(|a|, |b|) + 1e-8)`.
pub fn full_gradient_check(seed: u64) -> f64 {
    use evgust::evidential::total_loss;
    use evgust::nncore::Mlp;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let inputs = r.random_range(1..5);
    let depth = r.random_range(1..3);
    let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(2..7)).collect();
    let l1 = if r.random_bool(0.5) { 1e-3 } else { 0.0 };
    let l2 = if r.random_bool(0.5) { 1e-3 } else { 0.0 };
    let lambda = r.random_range(0.0..1.0);
    let n = r.random_range(3..9);
    let x = Array2::from_shape_fn((n, inputs), |_| r.random_range(-2.0..2.0));
    let y = Array1::from_shape_fn(n, |_| r.random_range(-3.0..3.0));
    let mut net = Mlp::new(inputs, &hidden, 0.0, l1, l2, &mut r).unwrap();

    let loss = |m: &Mlp| {
        let raw = m.predict(x.view()).unwrap();
        total_loss(m, raw.view(), y.view(), lambda).unwrap().0
    };
    let (raw, cache) = net.forward(x.view(), false, &mut r).unwrap();
    let (_, upstream) = total_loss(&net, raw.view(), y.view(), lambda).unwrap();
    let grads = net.backward(&cache, upstream.view()).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut compare = |a: f64, b: f64| {
        let e = (a - b).abs() / (a.abs().max(b.abs()) + 1e-8);
        worst = worst.max(e);
    };
    for li in 0..net.layers().len() {
        let (rows, cols) = net.layers()[li].weights.dim();
        for i in 0..rows {
            for j in 0..cols {
                let w0 = net.layers()[li].weights[[i, j]];
                net.layers_mut()[li].weights[[i, j]] = w0 + h;
                let up = loss(&net);
                net.layers_mut()[li].weights[[i, j]] = w0 - h;
                let down = loss(&net);
                net.layers_mut()[li].weights[[i, j]] = w0;
                compare(grads.layers[li].weights[[i, j]], (up - down) / (2.0 * h));
            }
        }
        for j in 0..cols {
            let b0 = net.layers()[li].bias[j];
            net.layers_mut()[li].bias[j] = b0 + h;
            let up = loss(&net);
            net.layers_mut()[li].bias[j] = b0 - h;
            let down = loss(&net);
            net.layers_mut()[li].bias[j] = b0;
            compare(grads.layers[li].bias[j], (up - down) / (2.0 * h));
        }
    }
    worst
}

/// Random valid NIG parameters.
pub fn random_nig<R: Rng>(r: &mut R) -> evgust::evidential::NigParams {
    evgust::evidential::NigParams::new(
        r.random_range(-10.0..10.0),
        10f64.powf(r.random_range(-3.0..3.0)),
        1.0 + 10f64.powf(r.random_range(-3.0..2.0)),
        10f64.powf(r.random_range(-3.0..3.0)),
    )
    .unwrap()
}
