//! Monte Carlo policy evaluation, regret, replication orchestration and the
//! calibration / tightness studies of the reward uncertainty.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{run_method_with_models, Method, MethodSpec, PipelineConfig, RewardModels};
use crate::environments::{
    generate_offline_data, remove_suboptimal_fraction, Env, Environment, GridConfig, GridEnv,
    LinearGaussianConfig, LinearGaussianEnv,
};
use crate::error::{Result, ResultExt, SplError};
use crate::mdp::{OfflineDataset, Policy, State};
use crate::reward_uq::PessimisticRewardModel;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discounting {
    Discounted,
    UndiscountedSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_trajectories: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub discounting: Discounting,
    pub seed: u64,
}

impl EvalConfig {
    /// 500 rollouts of two steps, plain sum of rewards.
    pub fn grid() -> Self {
        Self {
            n_trajectories: 500,
            horizon: 2,
            gamma: 0.95,
            discounting: Discounting::UndiscountedSum,
            seed: 0,
        }
    }

    /// 100 rollouts of 20 steps discounted at 0.99; the sum starts at `t = 0`.
    pub fn linear_gaussian() -> Self {
        Self {
            n_trajectories: 100,
            horizon: 20,
            gamma: 0.99,
            discounting: Discounting::Discounted,
            seed: 0,
        }
    }

    pub fn for_env(env: &Env) -> Self {
        match env {
            Env::Grid(_) => Self::grid(),
            Env::LinearGaussian(_) => Self::linear_gaussian(),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    fn validate(&self) -> Result<()> {
        if self.n_trajectories < 1 || self.horizon < 1 {
            return Err(SplError::InvalidArgument(
                "evaluation needs at least one trajectory of at least one step".into(),
            ));
        }
        Ok(())
    }
}

/// Mean with its standard error over independent draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, stderr, n }
    }
}

/// `sqrt(se_a² + se_b²)`.
pub fn pooled_stderr(a: &Estimate, b: &Estimate) -> f64 {
    a.stderr.hypot(b.stderr)
}

/// One cumulative reward per rollout. Rollout `i` draws from its own stream
/// `derive_seed(cfg.seed, i)`, so two policies evaluated with the same config
/// share start states and noise (common random numbers).
pub fn trajectory_returns<E: Environment>(
    env: &E,
    policy: &Policy,
    cfg: &EvalConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if policy.n_actions() != env.n_actions() {
        return Err(SplError::DimensionMismatch {
            expected: env.n_actions(),
            got: policy.n_actions(),
        });
    }
    (0..cfg.n_trajectories)
        .map(|i| {
            let mut r = rng::seeded(rng::derive_seed(cfg.seed, i as u64));
            let mut state = env.initial_state(&mut r);
            let (mut total, mut discount) = (0.0, 1.0);
            for _ in 0..cfg.horizon {
                let a = policy.sample_action(&state, &mut r)?;
                let (reward, next) = env.sample(&state, a, &mut r)?;
                total += discount * reward;
                if cfg.discounting == Discounting::Discounted {
                    discount *= cfg.gamma;
                }
                state = next;
            }
            Ok(total)
        })
        .collect()
}

pub fn mc_return<E: Environment>(env: &E, policy: &Policy, cfg: &EvalConfig) -> Result<Estimate> {
    Ok(Estimate::from_samples(&trajectory_returns(env, policy, cfg)?))
}

/// `J(π*) - J(π̂)` from paired rollouts; the stderr is that of the paired
/// differences.
pub fn regret<E: Environment>(env: &E, policy: &Policy, cfg: &EvalConfig) -> Result<Estimate> {
    let best = trajectory_returns(env, &env.optimal_policy()?, cfg)?;
    let ours = trajectory_returns(env, policy, cfg)?;
    Ok(paired_difference(&best, &ours))
}

fn paired_difference(a: &[f64], b: &[f64]) -> Estimate {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Estimate::from_samples(&d)
}

/// Spearman rank correlation with average ranks for ties; NaN when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let r = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = r;
            }
            i = j + 1;
        }
        out
    }
    if x.len() != y.len() || x.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

// ---------------------------------------------------------------------------
// scenarios

/// Serializable environment choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum EnvConfig {
    Grid(GridConfig),
    LinearGaussian(LinearGaussianConfig),
}

impl EnvConfig {
    pub fn build(&self) -> Result<Env> {
        Ok(match self {
            EnvConfig::Grid(c) => Env::Grid(GridEnv::new(c.clone())?),
            EnvConfig::LinearGaussian(c) => Env::LinearGaussian(LinearGaussianEnv::new(c.clone())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BehaviorSpec {
    Uniform,
    /// ε-greedy around the environment's optimal policy.
    EpsilonOptimal { epsilon: f64 },
}

impl BehaviorSpec {
    pub fn policy(&self, env: &Env) -> Result<Policy> {
        Ok(match *self {
            BehaviorSpec::Uniform => Policy::Uniform {
                n_actions: env.n_actions(),
            },
            BehaviorSpec::EpsilonOptimal { epsilon } => {
                Policy::epsilon_greedy(env.optimal_policy()?, epsilon)?
            }
        })
    }

    pub fn epsilon(&self) -> Option<f64> {
        match *self {
            BehaviorSpec::Uniform => None,
            BehaviorSpec::EpsilonOptimal { epsilon } => Some(epsilon),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoverageMode {
    Full,
    /// Sub-optimal labeled tuples are thinned by `removal_fraction`
    /// (continuous environment only).
    Partial,
}

impl CoverageMode {
    pub fn name(&self) -> &'static str {
        match self {
            CoverageMode::Full => "full",
            CoverageMode::Partial => "partial",
        }
    }
}

/// One cell of an experiment: data-generating process, methods and
/// evaluation protocol. Sizes count trajectories of length `horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub env: EnvConfig,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub horizon: usize,
    pub labeled_behavior: BehaviorSpec,
    pub unlabeled_behavior: BehaviorSpec,
    pub coverage: CoverageMode,
    pub removal_fraction: f64,
    pub methods: Vec<MethodSpec>,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
    pub base_seed: u64,
}

impl Scenario {
    /// The ε reported with each row: that of the unlabeled behavior when it
    /// is ε-greedy, otherwise that of the labeled behavior.
    pub fn epsilon(&self) -> Option<f64> {
        self.unlabeled_behavior.epsilon().or(self.labeled_behavior.epsilon())
    }

    pub fn rep_seed(&self, rep: usize) -> u64 {
        self.base_seed.wrapping_add(rep as u64)
    }

    /// Fresh `L ∪ U` for replication seed `seed`.
    pub fn generate(&self, env: &Env, seed: u64) -> Result<OfflineDataset> {
        let behavior_l = self.labeled_behavior.policy(env)?;
        let mut l = generate_offline_data(
            env,
            &behavior_l,
            self.n_labeled,
            self.horizon,
            true,
            rng::derive_seed(seed, 1),
        )
        .context("generating labeled data")?;
        if self.coverage == CoverageMode::Partial {
            let Env::LinearGaussian(lg) = env else {
                return Err(SplError::Config(
                    "partial coverage is defined for the linear-gaussian environment only".into(),
                ));
            };
            l = remove_suboptimal_fraction(&l, lg, self.removal_fraction, rng::derive_seed(seed, 3))?;
        }
        if self.n_unlabeled == 0 {
            return Ok(l);
        }
        let behavior_u = self.unlabeled_behavior.policy(env)?;
        let u = generate_offline_data(
            env,
            &behavior_u,
            self.n_unlabeled,
            self.horizon,
            false,
            rng::derive_seed(seed, 2),
        )
        .context("generating unlabeled data")?;
        Ok(OfflineDataset::merge(l, u))
    }
}

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub method: String,
    pub rep: usize,
    pub metric: String,
    pub value: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub epsilon: Option<f64>,
    pub coverage_mode: String,
    pub seed: u64,
}

pub const RESULTS_HEADER: [&str; 9] = [
    "method",
    "rep",
    "metric",
    "value",
    "n_labeled",
    "n_unlabeled",
    "epsilon",
    "coverage_mode",
    "seed",
];

/// Metric carried by a row that records a failed replication; its value is NaN.
pub const ERROR_METRIC: &str = "error";

pub fn write_results_csv<W: Write>(rows: &[ReplicationResult], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.rep.to_string(),
            r.metric.clone(),
            format!("{:?}", r.value),
            r.n_labeled.to_string(),
            r.n_unlabeled.to_string(),
            r.epsilon.map(|e| format!("{e:?}")).unwrap_or_default(),
            r.coverage_mode.clone(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses `results.csv`; malformed rows are reported together by line number.
pub fn read_results_csv<R: Read>(reader: R) -> Result<Vec<ReplicationResult>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(RESULTS_HEADER) {
        return Err(SplError::Malformed(format!(
            "line 1: expected header {}",
            RESULTS_HEADER.join(",")
        )));
    }
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let parsed = rec.ok().and_then(|rec| {
            if rec.len() != RESULTS_HEADER.len() {
                return None;
            }
            let epsilon = match &rec[6] {
                "" => None,
                e => Some(e.parse().ok()?),
            };
            Some(ReplicationResult {
                method: rec[0].to_string(),
                rep: rec[1].parse().ok()?,
                metric: rec[2].to_string(),
                value: rec[3].parse().ok()?,
                n_labeled: rec[4].parse().ok()?,
                n_unlabeled: rec[5].parse().ok()?,
                epsilon,
                coverage_mode: rec[7].to_string(),
                seed: rec[8].parse().ok()?,
            })
        });
        match parsed {
            Some(r) => rows.push(r),
            None => bad.push(line.to_string()),
        }
    }
    if !bad.is_empty() {
        return Err(SplError::Malformed(format!("bad rows at lines {}", bad.join(", "))));
    }
    Ok(rows)
}

/// Runs every method of `scenario` on replication `rep`. Failures become
/// `error` rows instead of aborting.
pub fn run_replication(scenario: &Scenario, rep: usize) -> Vec<ReplicationResult> {
    let seed = scenario.rep_seed(rep);
    let row = |method: &str, metric: &str, value: f64| ReplicationResult {
        method: method.to_string(),
        rep,
        metric: metric.to_string(),
        value,
        n_labeled: scenario.n_labeled,
        n_unlabeled: scenario.n_unlabeled,
        epsilon: scenario.epsilon(),
        coverage_mode: scenario.coverage.name().to_string(),
        seed,
    };
    let fail_all = |e: &SplError| {
        log::warn!("replication {rep} failed: {e}");
        scenario
            .methods
            .iter()
            .map(|m| row(m.method.name(), ERROR_METRIC, f64::NAN))
            .collect::<Vec<_>>()
    };

    let prepared = (|| {
        let env = scenario.env.build()?;
        let data = scenario.generate(&env, seed)?;
        let models = RewardModels::fit(&env, &data, &scenario.pipeline, rng::derive_seed(seed, 4))
            .context("fitting reward models")?;
        let eval = scenario.eval.with_seed(rng::derive_seed(seed, 7));
        let best = trajectory_returns(&env, &env.optimal_policy()?, &eval)?;
        Ok::<_, SplError>((env, data, models, eval, best))
    })();
    let (env, data, models, eval, best) = match prepared {
        Ok(p) => p,
        Err(e) => return fail_all(&e),
    };

    let mut out = Vec::new();
    for spec in &scenario.methods {
        let name = spec.method.name();
        let result = (|| {
            let outcome = run_method_with_models(
                spec,
                &env,
                &data,
                &models,
                &scenario.pipeline,
                rng::derive_seed(seed, 9),
            )?;
            let returns = trajectory_returns(&env, &outcome.policy, &eval)?;
            Ok::<_, SplError>((outcome.diagnostics, returns))
        })();
        match result {
            Ok((diag, returns)) => {
                out.push(row(name, "return", Estimate::from_samples(&returns).mean));
                out.push(row(name, "regret", paired_difference(&best, &returns).mean));
                out.push(row(name, "n_training", diag.n_training as f64));
                out.push(row(name, "n_unlabeled_retained", diag.n_unlabeled_retained as f64));
                if let Some(v) = diag.mean_imputed_reward {
                    out.push(row(name, "mean_imputed_reward", v));
                }
                if let Some(v) = diag.mean_delta {
                    out.push(row(name, "mean_delta", v));
                }
            }
            Err(e) => {
                log::warn!("replication {rep}, method {name} failed: {e}");
                out.push(row(name, ERROR_METRIC, f64::NAN));
            }
        }
    }
    out
}

/// Replications `0..n_reps` on a pool of `parallelism` workers; rows come
/// back ordered by replication index whatever the schedule.
pub fn run_replications(
    scenario: &Scenario,
    n_reps: usize,
    parallelism: usize,
) -> Result<Vec<ReplicationResult>> {
    if n_reps < 1 {
        return Err(SplError::InvalidArgument("n_reps must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| SplError::InvalidArgument(e.to_string()))?;
    let per_rep: Vec<Vec<ReplicationResult>> = pool.install(|| {
        (0..n_reps)
            .into_par_iter()
            .map(|rep| run_replication(scenario, rep))
            .collect()
    });
    Ok(per_rep.into_iter().flatten().collect())
}

/// Per-method estimate of `metric` across replications (error rows and NaN
/// values skipped).
pub fn method_estimate(rows: &[ReplicationResult], method: Method, metric: &str) -> Estimate {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method.name() && r.metric == metric && r.value.is_finite())
        .map(|r| r.value)
        .collect();
    Estimate::from_samples(&v)
}

// ---------------------------------------------------------------------------
// reward-uncertainty studies

/// Data sizes and fitting choices shared by the calibration and tightness
/// studies. Sizes count trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub env: EnvConfig,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub horizon: usize,
    pub behavior: BehaviorSpec,
    pub n_reps: usize,
    pub n_points: usize,
    pub pipeline: PipelineConfig,
    pub seed: u64,
}

impl StudyConfig {
    /// Uniform-behavior data on the continuous environment with its default
    /// regression pipeline.
    pub fn linear_gaussian(n_labeled: usize, n_unlabeled: usize, n_reps: usize, n_points: usize) -> Self {
        let env = Env::LinearGaussian(LinearGaussianEnv::default());
        Self {
            env: EnvConfig::LinearGaussian(LinearGaussianConfig::default()),
            n_labeled,
            n_unlabeled,
            horizon: 30,
            behavior: BehaviorSpec::Uniform,
            n_reps,
            n_points,
            pipeline: PipelineConfig::for_env(&env),
            seed: 0,
        }
    }

    fn scenario(&self) -> Scenario {
        let env_eval = EvalConfig::linear_gaussian();
        Scenario {
            env: self.env.clone(),
            n_labeled: self.n_labeled,
            n_unlabeled: self.n_unlabeled,
            horizon: self.horizon,
            labeled_behavior: self.behavior,
            unlabeled_behavior: self.behavior,
            coverage: CoverageMode::Full,
            removal_fraction: 0.0,
            methods: Vec::new(),
            pipeline: self.pipeline.clone(),
            eval: env_eval,
            base_seed: self.seed,
        }
    }

    /// Refit of replication `rep` on fresh data.
    pub fn fit(&self, env: &Env, rep: usize) -> Result<RewardModels> {
        let sc = self.scenario();
        let seed = sc.rep_seed(rep);
        let data = sc.generate(env, seed)?;
        RewardModels::fit(env, &data, &self.pipeline, rng::derive_seed(seed, 4))
    }
}

/// Fixed evaluation points: start-distribution states paired with actions in
/// rotation, drawn from a dedicated stream of `seed`.
pub fn evaluation_grid<E: Environment>(env: &E, n_points: usize, seed: u64) -> Vec<(State, usize)> {
    let mut r = rng::seeded(rng::derive_seed(seed, 0xE7A1));
    (0..n_points)
        .map(|i| (env.initial_state(&mut r), i % env.n_actions()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub alpha: f64,
    pub n_refits: usize,
    pub truth: Vec<f64>,
    /// Fraction of refits with `r_spl <= R` at each point.
    pub coverage: Vec<f64>,
    pub threshold: f64,
    /// Points whose coverage falls below `1 - α - 0.03`.
    pub flagged: Vec<usize>,
    pub failed_refits: usize,
}

/// Empirical frequency of `R̂_SPL(s,a) <= R(s,a)` over independent refits.
/// `refit(i)` returns the model of refit `i`; failed refits are counted and
/// excluded.
pub fn coverage_report<F>(
    refit: F,
    points: &[(State, usize)],
    truth: &[f64],
    n_refits: usize,
    alpha: f64,
) -> Result<CoverageReport>
where
    F: Fn(usize) -> Result<PessimisticRewardModel> + Sync,
{
    if points.len() != truth.len() {
        return Err(SplError::DimensionMismatch {
            expected: points.len(),
            got: truth.len(),
        });
    }
    let hits: Vec<Option<Vec<bool>>> = (0..n_refits)
        .into_par_iter()
        .map(|i| {
            let model = match refit(i) {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("coverage refit {i} failed: {e}");
                    return Ok(None);
                }
            };
            points
                .iter()
                .zip(truth)
                .map(|((s, a), r)| Ok(model.predict(s, *a)?.r_spl <= *r))
                .collect::<Result<Vec<_>>>()
                .map(Some)
        })
        .collect::<Result<_>>()?;
    let ok: Vec<&Vec<bool>> = hits.iter().flatten().collect();
    if ok.is_empty() {
        return Err(SplError::InvalidArgument("every coverage refit failed".into()));
    }
    let coverage: Vec<f64> = (0..points.len())
        .map(|j| ok.iter().filter(|h| h[j]).count() as f64 / ok.len() as f64)
        .collect();
    let threshold = 1.0 - alpha - 0.03;
    let flagged = (0..points.len()).filter(|&j| coverage[j] < threshold).collect();
    Ok(CoverageReport {
        alpha,
        n_refits,
        truth: truth.to_vec(),
        coverage,
        threshold,
        flagged,
        failed_refits: n_refits - ok.len(),
    })
}

/// Calibration of the semi-supervised model on the study's data process.
pub fn coverage_study(cfg: &StudyConfig) -> Result<CoverageReport> {
    let env = cfg.env.build()?;
    let points = evaluation_grid(&env, cfg.n_points, cfg.seed);
    let truth = points
        .iter()
        .map(|(s, a)| env.expected_reward(s, *a))
        .collect::<Result<Vec<_>>>()?;
    coverage_report(
        |i| Ok(cfg.fit(&env, i)?.semi),
        &points,
        &truth,
        cfg.n_reps,
        cfg.pipeline.alpha,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TightnessReport {
    pub mean_delta_ini: Vec<f64>,
    pub mean_delta_sug: Vec<f64>,
    /// `mean Δ_SUG / mean Δ_INI` per point (NaN where both vanish).
    pub ratio: Vec<f64>,
    /// Share of points with `mean Δ_SUG <= mean Δ_INI`.
    pub fraction_tighter: f64,
    /// One-sided paired t statistic of the grid-averaged `Δ_SUG - Δ_INI`
    /// across replications; large negative values favour `Δ_SUG`.
    pub t_statistic: f64,
    pub n_reps: usize,
    pub failed_reps: usize,
}

/// Per-point replication means of `Δ_INI` and `Δ_SUG`. `fit(i)` returns the
/// labeled-only and semi-supervised models of replication `i`, fitted on the
/// same data.
pub fn uq_tightness_report<F>(fit: F, points: &[(State, usize)], n_reps: usize) -> Result<TightnessReport>
where
    F: Fn(usize) -> Result<(PessimisticRewardModel, PessimisticRewardModel)> + Sync,
{
    let per_rep: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..n_reps)
        .into_par_iter()
        .map(|i| {
            let (ini, sug) = match fit(i) {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("tightness replication {i} failed: {e}");
                    return Ok(None);
                }
            };
            let d = |m: &PessimisticRewardModel| {
                points
                    .iter()
                    .map(|(s, a)| Ok(m.predict(s, *a)?.delta))
                    .collect::<Result<Vec<_>>>()
            };
            Ok(Some((d(&ini)?, d(&sug)?)))
        })
        .collect::<Result<_>>()?;
    let ok: Vec<&(Vec<f64>, Vec<f64>)> = per_rep.iter().flatten().collect();
    if ok.is_empty() {
        return Err(SplError::InvalidArgument("every tightness replication failed".into()));
    }
    let k = ok.len() as f64;
    let mean_of = |pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<f64> {
        (0..points.len())
            .map(|j| ok.iter().map(|r| pick(r)[j]).sum::<f64>() / k)
            .collect()
    };
    let mean_delta_ini = mean_of(|r| &r.0);
    let mean_delta_sug = mean_of(|r| &r.1);
    let ratio: Vec<f64> = mean_delta_sug
        .iter()
        .zip(&mean_delta_ini)
        .map(|(s, i)| if *s == 0.0 && *i == 0.0 { f64::NAN } else { s / i })
        .collect();
    let fraction_tighter = mean_delta_sug
        .iter()
        .zip(&mean_delta_ini)
        .filter(|(s, i)| s <= i)
        .count() as f64
        / points.len().max(1) as f64;
    let diffs: Vec<f64> = ok
        .iter()
        .map(|(ini, sug)| {
            sug.iter().zip(ini).map(|(s, i)| s - i).sum::<f64>() / points.len().max(1) as f64
        })
        .collect();
    let est = Estimate::from_samples(&diffs);
    let t_statistic = if est.stderr > 0.0 {
        est.mean / est.stderr
    } else {
        0.0
    };
    Ok(TightnessReport {
        mean_delta_ini,
        mean_delta_sug,
        ratio,
        fraction_tighter,
        t_statistic,
        n_reps,
        failed_reps: n_reps - ok.len(),
    })
}

pub fn tightness_study(cfg: &StudyConfig) -> Result<TightnessReport> {
    let env = cfg.env.build()?;
    let points = evaluation_grid(&env, cfg.n_points, cfg.seed);
    uq_tightness_report(
        |i| {
            let m = cfg.fit(&env, i)?;
            Ok((m.labeled_only, m.semi))
        },
        &points,
        cfg.n_reps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{AuxiliaryKind, MethodSpec};
    use approx::assert_abs_diff_eq;

    fn grid_env() -> Env {
        Env::Grid(GridEnv::new(GridConfig::default()).unwrap())
    }

    #[test]
    fn constant_reward_gives_geometric_sum() {
        // every move succeeds into a non-goal cell with zero-variance reward 1
        let cfg = GridConfig {
            goal_reward_mean: 1.0,
            goal_reward_std: 0.0,
            other_reward_mean: 1.0,
            other_reward_std: 0.0,
            ..Default::default()
        };
        let env = GridEnv::new(cfg).unwrap();
        let eval = EvalConfig {
            n_trajectories: 7,
            horizon: 10,
            gamma: 0.9,
            discounting: Discounting::Discounted,
            seed: 3,
        };
        let est = mc_return(&env, &Policy::Uniform { n_actions: 5 }, &eval).unwrap();
        assert_abs_diff_eq!(est.mean, (1.0 - 0.9f64.powi(10)) / 0.1, epsilon = 1e-12);
        assert!(est.stderr < 1e-12);
        let plain = EvalConfig {
            discounting: Discounting::UndiscountedSum,
            ..eval
        };
        assert_abs_diff_eq!(mc_return(&env, &Policy::Uniform { n_actions: 5 }, &plain).unwrap().mean, 10.0);
    }

    #[test]
    fn defaults_match_the_protocols() {
        let g = EvalConfig::grid();
        assert_eq!((g.n_trajectories, g.horizon, g.discounting), (500, 2, Discounting::UndiscountedSum));
        let l = EvalConfig::linear_gaussian();
        assert_eq!((l.n_trajectories, l.horizon, l.gamma), (100, 20, 0.99));
    }

    #[test]
    fn self_regret_is_exactly_zero() {
        let env = grid_env();
        let r = regret(&env, &env.optimal_policy().unwrap(), &EvalConfig::grid()).unwrap();
        assert_eq!(r.mean, 0.0);
        let lg = LinearGaussianEnv::default();
        let r = regret(&lg, &Policy::SignOfStateSum, &EvalConfig::linear_gaussian()).unwrap();
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn wrong_sign_policy_has_positive_regret() {
        use crate::features::FeatureMap;
        use crate::policy_learning::{QFunction, QRepr};
        let lg = LinearGaussianEnv::default();
        // Q = -5a(s1+s2) in poly2 coordinates: greedy action is -sign(s1+s2)
        let w = nalgebra::DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0, 5.0, 5.0, -5.0, -5.0]);
        let wrong = Policy::Greedy(QFunction {
            repr: QRepr::Linear { weights: w, features: FeatureMap::Poly2 },
            gamma: 0.99,
            v_max: f64::MAX,
            iterations: 0,
            max_iter: 0,
            tol: 0.0,
        });
        let r = regret(&lg, &wrong, &EvalConfig::linear_gaussian()).unwrap();
        assert!(r.mean > 3.0 * r.stderr, "{r:?}");
    }

    #[test]
    fn estimate_of_two_values() {
        let e = Estimate::from_samples(&[1.0, 3.0]);
        assert_eq!((e.mean, e.stderr, e.n), (2.0, 1.0, 2));
        let one = Estimate::from_samples(&[5.0]);
        assert_eq!((one.mean, one.stderr), (5.0, 0.0));
    }

    #[test]
    fn spearman_against_hand_ranks() {
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]), 1.0);
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        // ties: x ranks (1.5, 1.5, 3), y ranks (1, 2, 3)
        let expect = {
            let (rx, ry) = ([1.5, 1.5, 3.0], [1.0, 2.0, 3.0]);
            let mx = 2.0;
            let c: f64 = (0..3).map(|i| (rx[i] - mx) * (ry[i] - mx)).sum();
            let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
            let vy: f64 = ry.iter().map(|a| (a - mx) * (a - mx)).sum();
            c / (vx * vy).sqrt()
        };
        assert_abs_diff_eq!(spearman(&[0.0, 0.0, 1.0], &[1.0, 2.0, 3.0]), expect, epsilon = 1e-15);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_nan());
    }

    fn small_grid_scenario() -> Scenario {
        let env = grid_env();
        Scenario {
            env: EnvConfig::Grid(GridConfig::default()),
            n_labeled: 60,
            n_unlabeled: 60,
            horizon: 1,
            labeled_behavior: BehaviorSpec::EpsilonOptimal { epsilon: 0.1 },
            unlabeled_behavior: BehaviorSpec::Uniform,
            coverage: CoverageMode::Full,
            removal_fraction: 0.0,
            methods: vec![MethodSpec::new(Method::Pl), MethodSpec::new(Method::Spl)],
            pipeline: PipelineConfig {
                q_learning: crate::policy_learning::QLearningConfig {
                    n_updates: 2000,
                    ..Default::default()
                },
                ..PipelineConfig::for_env(&env)
            },
            eval: EvalConfig {
                n_trajectories: 50,
                ..EvalConfig::grid()
            },
            base_seed: 11,
        }
    }

    #[test]
    fn replications_are_schedule_independent() {
        let sc = small_grid_scenario();
        let one = run_replications(&sc, 6, 1).unwrap();
        let many = run_replications(&sc, 6, 4).unwrap();
        assert_eq!(format!("{one:?}"), format!("{many:?}"));
        let direct = run_replication(&sc, 0);
        let single = run_replications(&sc, 1, 1).unwrap();
        assert_eq!(format!("{direct:?}"), format!("{single:?}"));
        assert!(one.iter().all(|r| r.metric != ERROR_METRIC));
        assert!(one.iter().any(|r| r.rep == 5 && r.seed == 16));
    }

    #[test]
    fn failures_become_error_rows() {
        let mut sc = small_grid_scenario();
        // Partial coverage is undefined on the grid: the whole replication fails.
        sc.coverage = CoverageMode::Partial;
        let rows = run_replications(&sc, 2, 1).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.metric == ERROR_METRIC && r.value.is_nan()));
        // a single unavailable method fails alone
        let mut sc = small_grid_scenario();
        sc.env = EnvConfig::LinearGaussian(LinearGaussianConfig::default());
        sc.pipeline = PipelineConfig::for_env(&sc.env.build().unwrap());
        sc.labeled_behavior = BehaviorSpec::Uniform;
        sc.n_labeled = 4;
        sc.n_unlabeled = 4;
        sc.horizon = 30;
        sc.methods = vec![MethodSpec::new(Method::Oracle), MethodSpec::new(Method::NoShare)];
        sc.eval = EvalConfig { n_trajectories: 5, ..EvalConfig::linear_gaussian() };
        let rows = run_replications(&sc, 1, 1).unwrap();
        assert_eq!(rows[0].metric, ERROR_METRIC);
        assert!(rows[1..].iter().all(|r| r.method == "NoShare" && r.metric != ERROR_METRIC));
    }

    #[test]
    fn results_csv_round_trips() {
        let rows = run_replications(&small_grid_scenario(), 2, 1).unwrap();
        let mut buf = Vec::new();
        write_results_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("method,rep,metric,value,n_labeled,n_unlabeled,epsilon,coverage_mode,seed\n"));
        let back = read_results_csv(&buf[..]).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn malformed_rows_are_listed() {
        let text = "method,rep,metric,value,n_labeled,n_unlabeled,epsilon,coverage_mode,seed\n\
                    SPL,0,return,1.0,1,1,,full,0\n\
                    SPL,x,return,1.0,1,1,,full,0\n\
                    SPL,0,return,oops,1,1,,full,0\n";
        let err = read_results_csv(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("3, 4"), "{err}");
    }

    #[test]
    fn infinite_penalty_covers_everywhere() {
        let env = LinearGaussianEnv::default();
        let cfg = StudyConfig::linear_gaussian(4, 8, 5, 6);
        let points = evaluation_grid(&env, 6, 0);
        let truth: Vec<f64> = points.iter().map(|(s, a)| env.expected_reward(s, *a).unwrap()).collect();
        let e = Env::LinearGaussian(env);
        let rep = coverage_report(
            |i| Ok(cfg.fit(&e, i)?.semi.with_forced_delta(f64::INFINITY)),
            &points,
            &truth,
            5,
            0.05,
        )
        .unwrap();
        assert!(rep.coverage.iter().all(|&c| c == 1.0));
        assert!(rep.flagged.is_empty());
    }

    #[test]
    fn zero_auxiliary_gives_unit_ratio() {
        let mut cfg = StudyConfig::linear_gaussian(4, 40, 5, 10);
        cfg.pipeline.auxiliary = AuxiliaryKind::Zero;
        let rep = tightness_study(&cfg).unwrap();
        for r in &rep.ratio {
            assert_abs_diff_eq!(*r, 1.0, epsilon = 1e-10);
        }
        assert_eq!(rep.fraction_tighter, 1.0);
    }
}
