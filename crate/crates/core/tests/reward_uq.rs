use std::sync::Arc;

use nalgebra::SymmetricEigen;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use spl_core::evaluation::uq_tightness_report;
use spl_core::features::FeatureMap;
use spl_core::mdp::{OfflineDataset, State, Transition};
use spl_core::reward_uq::{
    filter_by_uncertainty_quantile, ini_fit, suq_fit, AuxiliaryResiduals, AuxiliarySpec, Ridge,
    RewardFn, Sandwich, SuqConfig,
};
use spl_core::rng;

const R_MAX: f64 = 1e6;

// Poly2 coefficients of the linear part of the synthetic reward.
const THETA: [f64; 9] = [1.0, -0.5, 0.3, 0.2, -0.4, 2.0, 1.5, -1.0, 0.7];

fn linear_mean(s: &State, a: usize) -> f64 {
    let g = FeatureMap::Poly2.apply(s, a).unwrap();
    g.iter().zip(THETA).map(|(x, t)| x * t).sum()
}

/// Linear part plus a term poly2 cannot represent.
fn curved_mean(s: &State, a: usize) -> f64 {
    let c = s.coords().unwrap();
    linear_mean(s, a) + 3.0 * (3.0 * c[0]).sin() * (a as f64 - 1.0)
}

fn sample(
    n: usize,
    labeled: bool,
    noise: f64,
    mean: fn(&State, usize) -> f64,
    seed: u64,
) -> Vec<Transition> {
    let mut r = rng::seeded(seed);
    let eps = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|i| {
            let state = State::Continuous(vec![r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5)]);
            let action = r.gen_range(0..3);
            let reward = labeled.then(|| mean(&state, action) + noise * eps.sample(&mut r));
            Transition {
                traj_id: i,
                t: 0,
                next_state: state.clone(),
                state,
                action,
                reward,
            }
        })
        .collect()
}

fn config(auxiliary: AuxiliarySpec) -> SuqConfig {
    SuqConfig {
        alpha: 0.05,
        ridge: Ridge::Auto,
        r_max: R_MAX,
        auxiliary,
        residuals: AuxiliaryResiduals::InSample,
        sandwich: Sandwich::Hc0,
    }
}

fn function(f: fn(&State, usize) -> f64) -> AuxiliarySpec {
    let f: RewardFn = Arc::new(move |s, a| f(s, a));
    AuxiliarySpec::Function(f)
}

fn test_points(n: usize, seed: u64) -> Vec<(State, usize)> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|i| (State::Continuous(vec![r.gen_range(-1.2..1.2), r.gen_range(-1.2..1.2)]), i % 3))
        .collect()
}

#[test]
fn zero_auxiliary_reproduces_labeled_only_fit_exactly() {
    let l = sample(200, true, 1.0, curved_mean, 1);
    let u = sample(2000, false, 0.0, curved_mean, 2);
    let ini = ini_fit(&l, &FeatureMap::Poly2, 0.05, Ridge::Auto, R_MAX, Sandwich::Hc0).unwrap();
    let suq = suq_fit(&l, &u, &FeatureMap::Poly2, &config(AuxiliarySpec::Zero)).unwrap();
    assert_eq!(ini.theta(), suq.theta());
    for (s, a) in test_points(30, 3) {
        let (x, y) = (ini.predict(&s, a).unwrap(), suq.predict(&s, a).unwrap());
        assert_eq!(x, y);
    }
}

#[test]
fn perfect_auxiliary_on_noiseless_linear_data_has_no_uncertainty() {
    let l = sample(100, true, 0.0, linear_mean, 4);
    let u = sample(1000, false, 0.0, linear_mean, 5);
    let m = suq_fit(&l, &u, &FeatureMap::Poly2, &config(function(linear_mean))).unwrap();
    let sigma_l = &m.sigma_labeled().unwrap().sigma;
    assert!(sigma_l.amax() < 1e-12, "Σ_L = {sigma_l}");
    for (s, a) in test_points(20, 6) {
        let e = m.predict(&s, a).unwrap();
        assert!(e.delta < 1e-6, "Δ = {}", e.delta);
        assert!((e.r_sug - linear_mean(&s, a)).abs() < 1e-6);
    }
}

#[test]
fn unlabeled_term_shrinks_with_unlabeled_size() {
    let l = sample(100, true, 1.0, curved_mean, 7);
    let small = sample(500, false, 0.0, curved_mean, 8);
    let large = sample(50_000, false, 0.0, curved_mean, 9);
    let cfg = config(function(curved_mean));
    let a = suq_fit(&l, &small, &FeatureMap::Poly2, &cfg).unwrap();
    let b = suq_fit(&l, &large, &FeatureMap::Poly2, &cfg).unwrap();
    for (s, act) in test_points(25, 10) {
        let g = FeatureMap::Poly2.apply(&s, act).unwrap();
        let (ta, tb) = (a.variance_terms(&g)[1], b.variance_terms(&g)[1]);
        assert!(ta >= 50.0 * tb, "U term {ta} vs {tb}");
    }
}

#[test]
fn zero_feature_point_has_zero_uncertainty() {
    let l = sample(80, true, 1.0, curved_mean, 11);
    let u = sample(800, false, 0.0, curved_mean, 12);
    let ini = ini_fit(&l, &FeatureMap::Poly2, 0.05, Ridge::Auto, R_MAX, Sandwich::Hc0).unwrap();
    let suq = suq_fit(&l, &u, &FeatureMap::Poly2, &config(function(curved_mean))).unwrap();
    let origin = State::Continuous(vec![0.0, 0.0]);
    for a in 0..3 {
        assert_eq!(ini.predict(&origin, a).unwrap().delta, 0.0);
        assert_eq!(suq.predict(&origin, a).unwrap().delta, 0.0);
    }
}

#[test]
fn full_quantile_keeps_every_unlabeled_tuple() {
    let l = sample(60, true, 1.0, linear_mean, 13);
    let u = sample(300, false, 0.0, linear_mean, 14);
    let data = OfflineDataset::new(l.clone(), u.clone(), 0).unwrap();
    let m = suq_fit(&l, &u, &FeatureMap::Poly2, &config(function(linear_mean))).unwrap();
    let kept = filter_by_uncertainty_quantile(&data, &m, 1.0).unwrap();
    assert_eq!(kept, data);
}

#[test]
fn perfect_auxiliary_with_hundredfold_unlabeled_data_halves_uncertainty() {
    // The features miss the curved term, so the labeled-only residuals carry
    // the approximation error while the semi-supervised residuals do not.
    let n_l = 50;
    let points: Vec<(State, usize)> = test_points(40, 15)
        .into_iter()
        .filter(|(s, a)| {
            let g = FeatureMap::Poly2.apply(s, *a).unwrap();
            g.iter().map(|x| x * x).sum::<f64>().sqrt() >= 0.5
        })
        .collect();
    assert!(points.len() >= 20);
    let report = uq_tightness_report(
        |i| {
            let seed = rng::derive_seed(99, i as u64);
            let l = sample(n_l, true, 0.1, curved_mean, rng::derive_seed(seed, 1));
            let u = sample(100 * n_l, false, 0.0, curved_mean, rng::derive_seed(seed, 2));
            let ini = ini_fit(&l, &FeatureMap::Poly2, 0.05, Ridge::Auto, R_MAX, Sandwich::Hc0)?;
            let suq = suq_fit(&l, &u, &FeatureMap::Poly2, &config(function(curved_mean)))?;
            Ok((ini, suq))
        },
        &points,
        30,
    )
    .unwrap();
    assert_eq!(report.failed_reps, 0);
    for (j, r) in report.ratio.iter().enumerate() {
        assert!(*r < 0.5, "point {j}: ratio {r}");
    }
    assert_eq!(report.fraction_tighter, 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn uncertainty_is_finite_nonnegative_and_pessimistic(
        seed in 0u64..10_000,
        n_l in 30usize..120,
        noise in 0.0f64..3.0,
        x in -2.0f64..2.0,
        y in -2.0f64..2.0,
        a in 0usize..3,
    ) {
        let l = sample(n_l, true, noise, curved_mean, seed);
        let u = sample(4 * n_l, false, 0.0, curved_mean, seed + 1);
        let m = suq_fit(&l, &u, &FeatureMap::Poly2, &config(function(curved_mean))).unwrap();
        let e = m.predict(&State::Continuous(vec![x, y]), a).unwrap();
        prop_assert!(e.delta.is_finite() && e.delta >= 0.0);
        prop_assert!(e.r_spl <= e.r_sug.max(-R_MAX));
        for c in m.components() {
            let sym = (&c.sigma - c.sigma.transpose()).amax();
            prop_assert!(sym <= 1e-9 * c.sigma.amax().max(1.0));
            let eig = SymmetricEigen::new(c.sigma.clone()).eigenvalues;
            prop_assert!(eig.min() >= -1e-9 * c.sigma.amax().max(1.0));
        }
    }
}
