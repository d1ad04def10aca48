mod support;

use evgust::evidential::{decompose, head_transform, nig_nll, NigParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

#[test]
fn nll_matches_quadrature_of_the_marginal() {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..20 {
        let p = NigParams::new(
            r.random_range(-3.0..3.0),
            r.random_range(0.1..5.0),
            r.random_range(1.2..6.0),
            r.random_range(0.1..3.0),
        )
        .unwrap();
        let y = p.gamma + r.random_range(-3.0..3.0);
        let closed = nig_nll(&p, y);
        let quad = nig_nll_quadrature(p.gamma, p.nu, p.alpha, p.beta, y);
        assert!((closed - quad).abs() < 1e-3, "{p:?} y={y}: {closed} vs {quad}");
    }
}

#[test]
fn quadrature_oracle_sanity() {
    // Student-t marginal at the mode with α = ν = β = 1 has a known value
    let q = nig_nll_quadrature(0.0, 1.0, 1.0, 1.0, 0.0);
    // t with 2 dof, scale sqrt(β(1+ν)/(να)) = sqrt(2): density at 0 = Γ(1.5)/(Γ(1)·sqrt(2π)·sqrt(2))
    let dens = 0.886_226_925_452_758 / ((2.0 * std::f64::consts::PI).sqrt() * 2f64.sqrt());
    assert!((q + dens.ln()).abs() < 1e-6, "{q}");
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let worst = full_gradient_check(seed);
        assert!(worst < 1e-3, "seed {seed}: relative error {worst}");
    }
}

#[test]
fn moments_add_up() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let d = decompose(&random_nig(&mut r)).unwrap();
        let sum = d.aleatoric_var + d.epistemic_var;
        assert!((d.total_var - sum).abs() <= 1e-12 * sum);
    }
    let d = decompose(&NigParams::new(5.0, 2.0, 3.0, 4.0).unwrap()).unwrap();
    assert_eq!((d.mean, d.aleatoric_var, d.epistemic_var, d.total_var), (5.0, 2.0, 1.0, 3.0));
}

proptest! {
    #[test]
    fn head_output_is_always_valid(a in -50.0..50.0f64, b in -50.0..50.0f64, c in -50.0..50.0f64, d in -50.0..50.0f64) {
        let p = head_transform([a, b, c, d]).unwrap();
        prop_assert!(p.nu > 0.0 && p.alpha > 1.0 && p.beta > 0.0);
        prop_assert_eq!(p.gamma, a);
        let dec = decompose(&p).unwrap();
        prop_assert!(dec.total_var.is_finite() && dec.total_var > 0.0);
    }

    #[test]
    fn epistemic_shrinks_with_evidence(nu in 0.01..100.0f64, k in 1.01..10.0f64, alpha in 1.01..20.0f64, beta in 0.01..10.0f64) {
        let lo = decompose(&NigParams::new(0.0, nu, alpha, beta).unwrap()).unwrap();
        let hi = decompose(&NigParams::new(0.0, nu * k, alpha, beta).unwrap()).unwrap();
        prop_assert!(hi.epistemic_var < lo.epistemic_var);
        prop_assert_eq!(hi.aleatoric_var, lo.aleatoric_var);
    }

    #[test]
    fn nll_is_smallest_at_the_mean(p in (-5.0..5.0f64, 0.1..5.0f64, 1.1..6.0f64, 0.1..3.0f64), dy in 0.01..5.0f64) {
        let p = NigParams::new(p.0, p.1, p.2, p.3).unwrap();
        prop_assert!(nig_nll(&p, p.gamma) < nig_nll(&p, p.gamma + dy));
        prop_assert!(nig_nll(&p, p.gamma) < nig_nll(&p, p.gamma - dy));
    }
}
