use rand::Rng;
use rand_distr::{Distribution, Normal};

use spl_core::baselines::{Method, MethodSpec, PipelineConfig, PlannerKind};
use spl_core::environments::{Env, GridConfig, GridEnv, LinearGaussianEnv};
use spl_core::evaluation::{
    coverage_report, method_estimate, pooled_stderr, regret, run_replications, BehaviorSpec,
    CoverageMode, EnvConfig, EvalConfig, Scenario, ERROR_METRIC,
};
use spl_core::features::FeatureMap;
use spl_core::mdp::{Policy, State, Transition};
use spl_core::policy_learning::{QFunction, QRepr};
use spl_core::reward_uq::{ini_fit, Ridge, Sandwich};
use spl_core::rng;

#[test]
fn uniform_regret_agrees_with_a_tenfold_larger_run() {
    let env = LinearGaussianEnv::default();
    let uniform = Policy::Uniform { n_actions: 3 };
    let small = regret(&env, &uniform, &EvalConfig::linear_gaussian().with_seed(1)).unwrap();
    let large_cfg = EvalConfig {
        n_trajectories: 1000,
        ..EvalConfig::linear_gaussian().with_seed(2)
    };
    let large = regret(&env, &uniform, &large_cfg).unwrap();
    assert!(small.mean > 0.0 && large.mean > 0.0);
    assert!(
        (small.mean - large.mean).abs() <= 2.0 * pooled_stderr(&small, &large),
        "{small:?} vs {large:?}"
    );
}

#[test]
fn wrong_sign_policy_regret_is_positive_at_every_size() {
    let env = LinearGaussianEnv::default();
    // greedy action of Q = -5a(s1+s2) in poly2 coordinates is -sign(s1+s2)
    let w = nalgebra::DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0, 5.0, 5.0, -5.0, -5.0]);
    let wrong = Policy::Greedy(QFunction {
        repr: QRepr::Linear {
            weights: w,
            features: FeatureMap::Poly2,
        },
        gamma: 0.99,
        v_max: f64::MAX,
        iterations: 0,
        max_iter: 0,
        tol: 0.0,
    });
    for (n, seed) in [(10, 3), (100, 4), (1000, 5)] {
        let cfg = EvalConfig {
            n_trajectories: n,
            ..EvalConfig::linear_gaussian().with_seed(seed)
        };
        let r = regret(&env, &wrong, &cfg).unwrap();
        assert!(r.mean > 0.0, "n = {n}: {r:?}");
    }
}

#[test]
fn larger_alpha_gives_markedly_lower_coverage() {
    let theta = [1.0, -0.5, 0.3, 0.2, -0.4, 2.0, 1.5, -1.0, 0.7];
    let mean = |s: &State, a: usize| -> f64 {
        let g = FeatureMap::Poly2.apply(s, a).unwrap();
        g.iter().zip(theta).map(|(x, t)| x * t).sum()
    };
    let mut r = rng::seeded(20);
    let points: Vec<(State, usize)> = (0..15)
        .map(|i| (State::Continuous(vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]), i % 3))
        .collect();
    let truth: Vec<f64> = points.iter().map(|(s, a)| mean(s, *a)).collect();
    let run = |alpha: f64| {
        coverage_report(
            |i| {
                let mut r = rng::seeded(rng::derive_seed(21, i as u64));
                let noise = Normal::new(0.0, 1.0).unwrap();
                let l: Vec<Transition> = (0..150)
                    .map(|k| {
                        let state = State::Continuous(vec![r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5)]);
                        let action = r.gen_range(0..3);
                        let reward = Some(mean(&state, action) + noise.sample(&mut r));
                        Transition { traj_id: k, t: 0, next_state: state.clone(), state, action, reward }
                    })
                    .collect();
                ini_fit(&l, &FeatureMap::Poly2, alpha, Ridge::Auto, 1e6, Sandwich::Hc0)
            },
            &points,
            &truth,
            400,
            alpha,
        )
        .unwrap()
    };
    let (tight, loose) = (run(0.05), run(0.5));
    for j in 0..points.len() {
        assert!(
            loose.coverage[j] <= tight.coverage[j] - 0.1,
            "point {j}: {} vs {}",
            loose.coverage[j],
            tight.coverage[j]
        );
    }
}

// Known gap: planning to convergence (here and in the Oracle method) exploits
// pairs seen once in L, whose tabular lower bound has zero width, while the
// slow Q-learning schedule of the model-free planner does not.
#[test]
#[ignore = "known gap: model-based SPL lands near the Oracle method, below model-free SPL"]
fn model_based_spl_matches_model_free_spl_on_the_grid() {
    let env = Env::Grid(GridEnv::new(GridConfig::default()).unwrap());
    let base = Scenario {
        env: EnvConfig::Grid(GridConfig::default()),
        n_labeled: 120,
        n_unlabeled: 150,
        horizon: 1,
        labeled_behavior: BehaviorSpec::EpsilonOptimal { epsilon: 0.1 },
        unlabeled_behavior: BehaviorSpec::Uniform,
        coverage: CoverageMode::Full,
        removal_fraction: 0.0,
        methods: vec![MethodSpec::new(Method::Spl)],
        pipeline: PipelineConfig::for_env(&env),
        eval: EvalConfig::grid(),
        base_seed: 2024,
    };
    let model_based = Scenario {
        pipeline: PipelineConfig {
            planner: PlannerKind::ModelBased,
            ..base.pipeline.clone()
        },
        ..base.clone()
    };
    let free = run_replications(&base, 20, 0).unwrap();
    let based = run_replications(&model_based, 20, 0).unwrap();
    assert!(free.iter().chain(&based).all(|r| r.metric != ERROR_METRIC));
    let a = method_estimate(&free, Method::Spl, "return");
    let b = method_estimate(&based, Method::Spl, "return");
    assert_eq!((a.n, b.n), (20, 20));
    assert!(
        (a.mean - b.mean).abs() <= pooled_stderr(&a, &b),
        "model-free {a:?} vs model-based {b:?}"
    );
}
