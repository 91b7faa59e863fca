//! Reward uncertainty quantification and pessimistic reward construction.
//!
//! The semi-supervised estimator splits the reward regression into two OLS
//! fits sharing an auxiliary predictor `f` trained on the labeled tuples:
//!
//! * labeled residuals `r - f(s,a)` regressed on `g(s,a)` give `θ_L, Σ_L`;
//! * auxiliary predictions `f(s,a)` on the unlabeled tuples regressed on
//!   `g(s,a)` give `θ_U, Σ_U`.
//!
//! `θ_SUG = θ_L + θ_U` and
//! `Δ_SUG(s,a) = sqrt(g'Σ_L g / n_L + g'Σ_U g / n_U)`. The pessimistic reward
//! is `R_SPL = g'θ_SUG - z_{1-α/2} Δ_SUG`, clipped to `[-R_max, R_max]`.

mod forest;
mod ols;
mod taw;

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

pub use forest::{ForestConfig, RandomForest, RegressionTree};
pub use ols::{
    design_matrix, fit_ols_clustered, fit_ols_sandwich, OlsFit, Ridge, Sandwich, AUTO_RIDGE_SCALE,
    MAX_CONDITION,
};
pub use taw::{l1_concentration_bound, taw_penalty, TawReference, TransitionCounts};

use crate::error::{Result, ResultExt, SplError};
use crate::features::{FeatureMap, InputEncoding};
use crate::mdp::{OfflineDataset, State, Transition};

pub(crate) use ols::{checked_spd_inverse, quad_form};

/// `Φ⁻¹(p)` of the standard normal.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// `z_{1-α/2}`.
pub fn z_two_sided(alpha: f64) -> f64 {
    normal_quantile(1.0 - alpha / 2.0)
}

pub type RewardFn = Arc<dyn Fn(&State, usize) -> f64 + Send + Sync>;

/// How the auxiliary reward predictor is obtained.
#[derive(Clone)]
pub enum AuxiliarySpec {
    /// Per-action bagged trees fit on the labeled tuples' encoded states.
    Forest {
        encoding: InputEncoding,
        config: ForestConfig,
    },
    /// `f ≡ 0`; the semi-supervised estimator then equals the labeled-only one.
    Zero,
    /// A fixed function, e.g. the true mean reward.
    Function(RewardFn),
}

impl std::fmt::Debug for AuxiliarySpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AuxiliarySpec::Forest { config, .. } => write!(f, "Forest({config:?})"),
            AuxiliarySpec::Zero => write!(f, "Zero"),
            AuxiliarySpec::Function(_) => write!(f, "Function"),
        }
    }
}

/// One bagged forest per action over the encoded state. A single forest on
/// `(s, one-hot a)` cannot find the interaction when rewards change sign
/// across actions (no marginal split reduces the error), so actions are
/// never pooled.
#[derive(Debug, Clone)]
pub struct ActionForest {
    encoding: InputEncoding,
    /// `None` for actions with fewer than two labeled tuples.
    forests: Vec<Option<RandomForest>>,
    /// Mean labeled reward, predicted for actions without a forest.
    fallback: f64,
}

impl ActionForest {
    /// Fits on `rows` of `labeled`; each action's forest uses its own stream.
    fn fit(
        labeled: &[Transition],
        rows: &[usize],
        encoding: InputEncoding,
        config: &ForestConfig,
    ) -> Result<Self> {
        let na = encoding.n_actions();
        let mut x: Vec<Vec<Vec<f64>>> = vec![Vec::new(); na];
        let mut y: Vec<Vec<f64>> = vec![Vec::new(); na];
        let mut total = 0.0;
        for &i in rows {
            let t = &labeled[i];
            let r = t.reward.ok_or_else(|| {
                SplError::InvalidArgument("labeled tuple without a reward".into())
            })?;
            if t.action >= na {
                return Err(SplError::InvalidAction {
                    action: t.action,
                    n_actions: na,
                });
            }
            x[t.action].push(encoding.encode(&t.state, t.action)?);
            y[t.action].push(r);
            total += r;
        }
        let forests = (0..na)
            .map(|a| {
                if y[a].len() < 2 {
                    return Ok(None);
                }
                let cfg = ForestConfig {
                    seed: crate::rng::derive_seed(config.seed, a as u64),
                    ..config.clone()
                };
                RandomForest::fit(&x[a], &y[a], &cfg).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encoding,
            forests,
            fallback: total / rows.len().max(1) as f64,
        })
    }

    pub fn predict(&self, state: &State, action: usize) -> Result<f64> {
        match self.forests.get(action) {
            Some(Some(f)) => f.predict(&self.encoding.encode(state, action)?),
            Some(None) => Ok(self.fallback),
            None => Err(SplError::InvalidAction {
                action,
                n_actions: self.forests.len(),
            }),
        }
    }

    /// Out-of-bag predictions for the tuples the model was fitted on
    /// (`rows` must be the fitting rows, in the same order).
    fn oob_predict(&self, labeled: &[Transition], rows: &[usize]) -> Result<Vec<f64>> {
        let mut out = vec![self.fallback; rows.len()];
        for (a, forest) in self.forests.iter().enumerate() {
            let Some(forest) = forest else { continue };
            let pos: Vec<usize> = (0..rows.len()).filter(|&k| labeled[rows[k]].action == a).collect();
            let x = pos
                .iter()
                .map(|&k| self.encoding.encode(&labeled[rows[k]].state, a))
                .collect::<Result<Vec<_>>>()?;
            for (k, v) in pos.into_iter().zip(forest.oob_predict(&x)?) {
                out[k] = v;
            }
        }
        Ok(out)
    }

    pub fn n_trees(&self) -> usize {
        self.forests.iter().flatten().map(RandomForest::n_trees).sum()
    }
}

#[derive(Clone)]
pub enum AuxiliaryModel {
    Forest(ActionForest),
    /// Average of fold models, each trained without one fold of `L`.
    CrossFit(Vec<ActionForest>),
    Zero,
    Function(RewardFn),
}

impl std::fmt::Debug for AuxiliaryModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AuxiliaryModel::Forest(m) => write!(f, "Forest({} trees)", m.n_trees()),
            AuxiliaryModel::CrossFit(m) => write!(f, "CrossFit({} folds)", m.len()),
            AuxiliaryModel::Zero => write!(f, "Zero"),
            AuxiliaryModel::Function(_) => write!(f, "Function"),
        }
    }
}

impl AuxiliaryModel {
    pub fn predict(&self, state: &State, action: usize) -> Result<f64> {
        match self {
            AuxiliaryModel::Forest(m) => m.predict(state, action),
            AuxiliaryModel::CrossFit(folds) => {
                let mut sum = 0.0;
                for m in folds {
                    sum += m.predict(state, action)?;
                }
                Ok(sum / folds.len() as f64)
            }
            AuxiliaryModel::Zero => Ok(0.0),
            AuxiliaryModel::Function(f) => Ok(f(state, action)),
        }
    }
}

fn check_auxiliary_input(labeled: &[Transition], needed: usize) -> Result<()> {
    if labeled.len() < needed {
        return Err(SplError::InvalidArgument(format!(
            "auxiliary model needs at least {needed} labeled tuples, got {}",
            labeled.len()
        )));
    }
    Ok(())
}

/// Fits the per-action forests on all labeled tuples.
pub fn fit_auxiliary(
    labeled: &[Transition],
    encoding: InputEncoding,
    config: &ForestConfig,
) -> Result<AuxiliaryModel> {
    check_auxiliary_input(labeled, 2)?;
    let rows: Vec<usize> = (0..labeled.len()).collect();
    Ok(AuxiliaryModel::Forest(ActionForest::fit(labeled, &rows, encoding, config)?))
}

/// Fold of each labeled tuple: whole trajectories are assigned round-robin,
/// falling back to tuples when there are fewer trajectories than folds.
fn fold_assignment(labeled: &[Transition], folds: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = labeled.iter().map(|t| t.traj_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() >= folds {
        labeled
            .iter()
            .map(|t| ids.binary_search(&t.traj_id).map_or(0, |p| p % folds))
            .collect()
    } else {
        (0..labeled.len()).map(|i| i % folds).collect()
    }
}

/// K-fold cross-fitted auxiliary: returns the fold ensemble together with
/// the out-of-fold prediction for every labeled tuple. The configured trees
/// are split evenly over the folds.
pub fn cross_fit_auxiliary(
    labeled: &[Transition],
    encoding: InputEncoding,
    config: &ForestConfig,
    folds: usize,
) -> Result<(AuxiliaryModel, Vec<f64>)> {
    if folds < 2 {
        return Err(SplError::InvalidArgument(format!(
            "cross-fitting needs at least 2 folds, got {folds}"
        )));
    }
    check_auxiliary_input(labeled, 2 * folds)?;
    let fold = fold_assignment(labeled, folds);
    let mut fitted = vec![0.0; labeled.len()];
    let mut models = Vec::with_capacity(folds);
    for k in 0..folds {
        let train: Vec<usize> = (0..labeled.len()).filter(|&i| fold[i] != k).collect();
        let cfg = ForestConfig {
            n_trees: (config.n_trees / folds).max(1),
            seed: crate::rng::derive_seed(config.seed, 1000 + k as u64),
            ..config.clone()
        };
        let model = ActionForest::fit(labeled, &train, encoding, &cfg)?;
        for i in (0..labeled.len()).filter(|&i| fold[i] == k) {
            fitted[i] = model.predict(&labeled[i].state, labeled[i].action)?;
        }
        models.push(model);
    }
    Ok((AuxiliaryModel::CrossFit(models), fitted))
}

pub fn build_auxiliary(spec: &AuxiliarySpec, labeled: &[Transition]) -> Result<AuxiliaryModel> {
    match spec {
        AuxiliarySpec::Forest { encoding, config } => fit_auxiliary(labeled, *encoding, config),
        AuxiliarySpec::Zero => Ok(AuxiliaryModel::Zero),
        AuxiliarySpec::Function(f) => Ok(AuxiliaryModel::Function(f.clone())),
    }
}

fn labeled_rewards(labeled: &[Transition]) -> Result<Vec<f64>> {
    labeled
        .iter()
        .map(|t| {
            t.reward.ok_or_else(|| {
                SplError::InvalidArgument(format!(
                    "labeled tuple (traj {}, t {}) has no reward",
                    t.traj_id, t.t
                ))
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UqMode {
    Suq,
    IniOnly,
    Tabular,
}

/// Per-pair output of a reward model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardEstimate {
    pub r_sug: f64,
    pub delta: f64,
    pub r_spl: f64,
}

/// `r_sug - z · delta` before clipping.
pub fn pessimistic_reward(r_sug: f64, delta: f64, z: f64) -> f64 {
    r_sug - z * delta
}

/// A covariance term `g'Σg / n` of the uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceComponent {
    pub sigma: DMatrix<f64>,
    pub n: usize,
    pub ridge: f64,
}

/// Conditional mean and population standard deviation of labeled rewards per
/// pair; unvisited pairs fall back to the global labeled mean with an
/// uncertainty placing the lower bound at the global minimum reward.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularRewardTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: Vec<usize>,
    pub global_mean: f64,
    pub global_min: f64,
    pub z: f64,
}

impl TabularRewardTable {
    pub fn estimate(&self, s: usize, a: usize) -> (f64, f64) {
        let k = s * self.n_actions + a;
        if self.count[k] > 0 {
            (self.mean[k], self.std[k])
        } else if self.z > 0.0 {
            (self.global_mean, (self.global_mean - self.global_min) / self.z)
        } else {
            (self.global_mean, 0.0)
        }
    }

    /// `R_ℓ(s,a) = mean - z · std`.
    pub fn lcb(&self, s: usize, a: usize) -> f64 {
        let (m, d) = self.estimate(s, a);
        m - self.z * d
    }
}

/// Tabular lower confidence bound rewards from labeled tuples.
pub fn tabular_reward_lcb(
    labeled: &[Transition],
    n_states: usize,
    n_actions: usize,
    z: f64,
) -> Result<TabularRewardTable> {
    if labeled.is_empty() {
        return Err(SplError::EmptyDataset);
    }
    let k = n_states * n_actions;
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    let mut global_min = f64::INFINITY;
    let mut global_sum = 0.0;
    let rewards = labeled_rewards(labeled)?;
    for (t, &r) in labeled.iter().zip(&rewards) {
        let s = t.state.index()?;
        if s >= n_states || t.action >= n_actions {
            return Err(SplError::InvalidState(format!("pair ({s}, {}) out of range", t.action)));
        }
        sum[s * n_actions + t.action] += r;
        count[s * n_actions + t.action] += 1;
        global_min = global_min.min(r);
        global_sum += r;
    }
    let mean: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let mut ss = vec![0.0; k];
    for (t, &r) in labeled.iter().zip(&rewards) {
        let i = t.state.index()? * n_actions + t.action;
        ss[i] += (r - mean[i]).powi(2);
    }
    let std = ss
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { (s / c as f64).sqrt() } else { 0.0 })
        .collect();
    Ok(TabularRewardTable {
        n_states,
        n_actions,
        mean,
        std,
        count,
        global_mean: global_sum / labeled.len() as f64,
        global_min,
        z,
    })
}

#[derive(Debug, Clone)]
enum Estimator {
    Linear {
        feature_map: FeatureMap,
        theta: DVector<f64>,
        components: Vec<VarianceComponent>,
    },
    Tabular(TabularRewardTable),
}

/// A fitted reward surface with its uncertainty and pessimistic reward.
#[derive(Debug, Clone)]
pub struct PessimisticRewardModel {
    pub mode: UqMode,
    pub alpha: f64,
    pub z: f64,
    pub r_max: f64,
    estimator: Estimator,
    /// Labeled-part coefficients `θ_L` (SUQ) or `θ_INI`.
    pub theta_labeled: Option<DVector<f64>>,
    pub theta_unlabeled: Option<DVector<f64>>,
    pub auxiliary: Option<Arc<AuxiliaryModel>>,
    forced_delta: Option<f64>,
}

/// Which auxiliary predictions enter the labeled residuals `r - f(s,a)`.
/// Only the forest auxiliary is affected; fixed functions are never fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxiliaryResiduals {
    /// Predictions of the forest trained on these very tuples. Residuals
    /// absorb label noise, which biases `θ_SUG` and understates `Σ_L`.
    InSample,
    /// Out-of-bag predictions of a single forest.
    OutOfBag,
    /// Out-of-fold predictions with trajectory-level folds; unlabeled tuples
    /// see the average of the fold forests.
    CrossFit { folds: usize },
}

impl Default for AuxiliaryResiduals {
    fn default() -> Self {
        AuxiliaryResiduals::CrossFit { folds: 5 }
    }
}

#[derive(Debug, Clone)]
pub struct SuqConfig {
    pub alpha: f64,
    pub ridge: Ridge,
    pub r_max: f64,
    pub auxiliary: AuxiliarySpec,
    pub residuals: AuxiliaryResiduals,
    /// Meat of both sandwiches.
    pub sandwich: Sandwich,
}

fn clusters(tuples: &[Transition], sandwich: Sandwich) -> Option<Vec<usize>> {
    match sandwich {
        Sandwich::Hc0 => None,
        Sandwich::Trajectory => Some(tuples.iter().map(|t| t.traj_id).collect()),
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(SplError::InvalidArgument(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    Ok(())
}

/// Labeled-only OLS: `R_INI = g'θ_INI`, `Δ_INI = sqrt(g'Σ g / n_L)`.
pub fn ini_fit(
    labeled: &[Transition],
    feature_map: &FeatureMap,
    alpha: f64,
    ridge: Ridge,
    r_max: f64,
    sandwich: Sandwich,
) -> Result<PessimisticRewardModel> {
    check_alpha(alpha)?;
    if labeled.is_empty() {
        return Err(SplError::EmptyDataset.context("labeled-only OLS"));
    }
    let x = design_matrix(feature_map, labeled)?;
    let y = labeled_rewards(labeled)?;
    let fit = fit_ols_clustered(&y, &x, ridge, clusters(labeled, sandwich).as_deref())
        .context("labeled-only OLS")?;
    Ok(PessimisticRewardModel {
        mode: UqMode::IniOnly,
        alpha,
        z: z_two_sided(alpha),
        r_max,
        theta_labeled: Some(fit.theta.clone()),
        theta_unlabeled: None,
        auxiliary: None,
        forced_delta: None,
        estimator: Estimator::Linear {
            feature_map: feature_map.clone(),
            theta: fit.theta,
            components: vec![VarianceComponent {
                sigma: fit.sandwich,
                n: fit.n,
                ridge: fit.ridge,
            }],
        },
    })
}

/// The four-step semi-supervised fit.
pub fn suq_fit(
    labeled: &[Transition],
    unlabeled: &[Transition],
    feature_map: &FeatureMap,
    config: &SuqConfig,
) -> Result<PessimisticRewardModel> {
    check_alpha(config.alpha)?;
    if labeled.is_empty() {
        return Err(SplError::EmptyDataset.context("suq: labeled data"));
    }
    if unlabeled.is_empty() {
        return Err(SplError::EmptyDataset.context("suq: unlabeled data"));
    }
    let y = labeled_rewards(labeled)?;
    let (aux, fitted) = match (&config.auxiliary, config.residuals) {
        (AuxiliarySpec::Forest { encoding, config: fc }, AuxiliaryResiduals::CrossFit { folds }) => {
            cross_fit_auxiliary(labeled, *encoding, fc, folds).context("suq step 1 (auxiliary model)")?
        }
        (spec, mode) => {
            let aux = build_auxiliary(spec, labeled).context("suq step 1 (auxiliary model)")?;
            let fitted = match (&aux, mode) {
                (AuxiliaryModel::Forest(m), AuxiliaryResiduals::OutOfBag) => {
                    let rows: Vec<usize> = (0..labeled.len()).collect();
                    m.oob_predict(labeled, &rows)?
                }
                _ => labeled
                    .iter()
                    .map(|t| aux.predict(&t.state, t.action))
                    .collect::<Result<Vec<_>>>()?,
            };
            (aux, fitted)
        }
    };
    let resid: Vec<f64> = y.iter().zip(&fitted).map(|(r, f)| r - f).collect();
    let x_l = design_matrix(feature_map, labeled)?;
    let fit_l = fit_ols_clustered(&resid, &x_l, config.ridge, clusters(labeled, config.sandwich).as_deref())
        .context("suq step 2 (labeled residual OLS)")?;

    let aux_u = unlabeled
        .iter()
        .map(|t| aux.predict(&t.state, t.action))
        .collect::<Result<Vec<_>>>()?;
    let x_u = design_matrix(feature_map, unlabeled)?;
    let fit_u = fit_ols_clustered(&aux_u, &x_u, config.ridge, clusters(unlabeled, config.sandwich).as_deref())
        .context("suq step 3 (unlabeled auxiliary OLS)")?;

    let theta = &fit_l.theta + &fit_u.theta;
    Ok(PessimisticRewardModel {
        mode: UqMode::Suq,
        alpha: config.alpha,
        z: z_two_sided(config.alpha),
        r_max: config.r_max,
        theta_labeled: Some(fit_l.theta.clone()),
        theta_unlabeled: Some(fit_u.theta.clone()),
        auxiliary: Some(Arc::new(aux)),
        forced_delta: None,
        estimator: Estimator::Linear {
            feature_map: feature_map.clone(),
            theta,
            components: vec![
                VarianceComponent {
                    sigma: fit_l.sandwich,
                    n: fit_l.n,
                    ridge: fit_l.ridge,
                },
                VarianceComponent {
                    sigma: fit_u.sandwich,
                    n: fit_u.n,
                    ridge: fit_u.ridge,
                },
            ],
        },
    })
}

impl PessimisticRewardModel {
    /// Wraps a tabular table; `z` is taken from the table.
    pub fn tabular(table: TabularRewardTable, alpha: f64, r_max: f64) -> Self {
        Self {
            mode: UqMode::Tabular,
            alpha,
            z: table.z,
            r_max,
            estimator: Estimator::Tabular(table),
            theta_labeled: None,
            theta_unlabeled: None,
            auxiliary: None,
            forced_delta: None,
        }
    }

    /// Known means with a constant uncertainty, for oracles and tests.
    pub fn from_table(
        n_states: usize,
        n_actions: usize,
        mean: Vec<f64>,
        delta: f64,
        z: f64,
        r_max: f64,
    ) -> Self {
        let k = n_states * n_actions;
        let table = TabularRewardTable {
            n_states,
            n_actions,
            global_mean: mean.iter().sum::<f64>() / k as f64,
            global_min: mean.iter().cloned().fold(f64::INFINITY, f64::min),
            mean,
            std: vec![delta; k],
            count: vec![1; k],
            z,
        };
        Self::tabular(table, 0.05, r_max)
    }

    /// Overrides every uncertainty with `delta`.
    pub fn with_forced_delta(mut self, delta: f64) -> Self {
        self.forced_delta = Some(delta);
        self
    }

    pub fn feature_map(&self) -> Option<&FeatureMap> {
        match &self.estimator {
            Estimator::Linear { feature_map, .. } => Some(feature_map),
            Estimator::Tabular(_) => None,
        }
    }

    pub fn table(&self) -> Option<&TabularRewardTable> {
        match &self.estimator {
            Estimator::Tabular(t) => Some(t),
            Estimator::Linear { .. } => None,
        }
    }

    /// `θ_SUG` (or `θ_INI`).
    pub fn theta(&self) -> Option<&DVector<f64>> {
        match &self.estimator {
            Estimator::Linear { theta, .. } => Some(theta),
            Estimator::Tabular(_) => None,
        }
    }

    pub fn components(&self) -> &[VarianceComponent] {
        match &self.estimator {
            Estimator::Linear { components, .. } => components,
            Estimator::Tabular(_) => &[],
        }
    }

    /// `(Σ_L, n_L)` and `(Σ_U, n_U)`; the second is absent for labeled-only fits.
    pub fn sigma_labeled(&self) -> Option<&VarianceComponent> {
        self.components().first()
    }

    pub fn sigma_unlabeled(&self) -> Option<&VarianceComponent> {
        self.components().get(1)
    }

    /// Per-component `g'Σg / n` at `g`.
    pub fn variance_terms(&self, g: &[f64]) -> Vec<f64> {
        self.components()
            .iter()
            .map(|c| quad_form(&c.sigma, g).max(0.0) / c.n as f64)
            .collect()
    }

    pub fn predict_from_features(&self, g: &[f64]) -> Result<RewardEstimate> {
        match &self.estimator {
            Estimator::Linear { theta, .. } => {
                if g.len() != theta.len() {
                    return Err(SplError::DimensionMismatch {
                        expected: theta.len(),
                        got: g.len(),
                    });
                }
                let r_sug: f64 = theta.iter().zip(g).map(|(t, x)| t * x).sum();
                let delta = self
                    .forced_delta
                    .unwrap_or_else(|| self.variance_terms(g).iter().sum::<f64>().sqrt());
                Ok(self.finish(r_sug, delta))
            }
            Estimator::Tabular(_) => Err(SplError::InvalidArgument(
                "tabular reward model is indexed by state, not features".into(),
            )),
        }
    }

    fn finish(&self, r_sug: f64, delta: f64) -> RewardEstimate {
        let raw = pessimistic_reward(r_sug, delta, self.z);
        let r_spl = if raw.is_nan() {
            -self.r_max
        } else {
            raw.clamp(-self.r_max, self.r_max)
        };
        RewardEstimate { r_sug, delta, r_spl }
    }

    pub fn predict(&self, state: &State, action: usize) -> Result<RewardEstimate> {
        match &self.estimator {
            Estimator::Linear { feature_map, .. } => {
                let g = feature_map.apply(state, action)?;
                self.predict_from_features(&g)
            }
            Estimator::Tabular(t) => {
                let s = state.index()?;
                if s >= t.n_states || action >= t.n_actions {
                    return Err(SplError::InvalidState(format!(
                        "pair ({s}, {action}) outside reward table"
                    )));
                }
                let (m, d) = t.estimate(s, action);
                Ok(self.finish(m, self.forced_delta.unwrap_or(d)))
            }
        }
    }

    /// CSV export: a `#` metadata line, then `name,i,j,value` rows.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        let fmap = self.feature_map().map(|m| m.id()).unwrap_or_else(|| "tabular".into());
        let comps = self.components();
        let ridges: Vec<String> = comps.iter().map(|c| c.ridge.to_string()).collect();
        let counts: Vec<String> = comps.iter().map(|c| c.n.to_string()).collect();
        writeln!(
            writer,
            "# mode={:?},alpha={},z={},r_max={},ridge={},n={},feature_map={}",
            self.mode,
            self.alpha,
            self.z,
            self.r_max,
            ridges.join("|"),
            counts.join("|"),
            fmap
        )?;
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["name", "i", "j", "value"])?;
        let mut put = |name: &str, i: usize, j: usize, v: f64| {
            w.write_record([name, &i.to_string(), &j.to_string(), &v.to_string()])
        };
        match &self.estimator {
            Estimator::Linear { theta, .. } => {
                for (i, v) in theta.iter().enumerate() {
                    put("theta", i, 0, *v)?;
                }
                let names = ["sigma_labeled", "sigma_unlabeled"];
                for (c, name) in comps.iter().zip(names) {
                    for i in 0..c.sigma.nrows() {
                        for j in 0..c.sigma.ncols() {
                            put(name, i, j, c.sigma[(i, j)])?;
                        }
                    }
                }
            }
            Estimator::Tabular(t) => {
                for s in 0..t.n_states {
                    for a in 0..t.n_actions {
                        let k = s * t.n_actions + a;
                        put("mean", s, a, t.mean[k])?;
                        put("std", s, a, t.std[k])?;
                        put("count", s, a, t.count[k] as f64)?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Type-1 empirical quantile: the smallest value with empirical CDF ≥ q.
pub fn empirical_quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[k - 1])
}

/// Keeps unlabeled tuples whose `Δ` is at most the empirical `q`-quantile of
/// all unlabeled `Δ` values.
pub fn filter_by_uncertainty_quantile(
    dataset: &OfflineDataset,
    model: &PessimisticRewardModel,
    q: f64,
) -> Result<OfflineDataset> {
    if !(0.0..=1.0).contains(&q) {
        return Err(SplError::InvalidArgument(format!("quantile must lie in [0, 1], got {q}")));
    }
    if q >= 1.0 || dataset.unlabeled.is_empty() {
        return Ok(dataset.clone());
    }
    let deltas = dataset
        .unlabeled
        .iter()
        .map(|t| Ok(model.predict(&t.state, t.action)?.delta))
        .collect::<Result<Vec<_>>>()?;
    let cut = empirical_quantile(&deltas, q).unwrap_or(f64::INFINITY);
    let unlabeled = dataset
        .unlabeled
        .iter()
        .zip(&deltas)
        .filter(|(_, &d)| d <= cut)
        .map(|(t, _)| t.clone())
        .collect();
    Ok(OfflineDataset {
        labeled: dataset.labeled.clone(),
        unlabeled,
        seed: dataset.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tuple(s: usize, a: usize, r: Option<f64>) -> Transition {
        Transition {
            traj_id: 0,
            t: 0,
            state: State::Discrete(s),
            action: a,
            reward: r,
            next_state: State::Discrete(s),
        }
    }

    #[test]
    fn z_matches_standard_normal_table() {
        assert_abs_diff_eq!(z_two_sided(0.05), 1.959963984540054, epsilon = 1e-9);
        assert_abs_diff_eq!(z_two_sided(1.0), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pessimistic_arithmetic() {
        let z = z_two_sided(0.05);
        assert_abs_diff_eq!(pessimistic_reward(1.0, 0.25, z), 0.510009, epsilon = 1e-6);
        assert_eq!(pessimistic_reward(1.7, 0.0, z), 1.7);
    }

    #[test]
    fn lcb_zero_variance_samples() {
        let l: Vec<_> = (0..3).map(|_| tuple(0, 0, Some(10.0))).collect();
        let t = tabular_reward_lcb(&l, 1, 1, 2.0).unwrap();
        assert_eq!(t.lcb(0, 0), 10.0);
    }

    #[test]
    fn lcb_population_std() {
        let l: Vec<_> = [9.0, 10.0, 11.0].iter().map(|&r| tuple(0, 0, Some(r))).collect();
        let t = tabular_reward_lcb(&l, 1, 1, 2.0).unwrap();
        assert_abs_diff_eq!(t.std[0], (2.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(t.lcb(0, 0), 10.0 - 2.0 * (2.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(t.lcb(0, 0), 8.367, epsilon = 5e-4);
    }

    #[test]
    fn lcb_unvisited_pairs_fall_back_to_minimum() {
        let l = vec![tuple(0, 0, Some(-1.0)), tuple(0, 0, Some(3.0)), tuple(1, 1, Some(0.5))];
        let t = tabular_reward_lcb(&l, 2, 2, 1.96).unwrap();
        assert_abs_diff_eq!(t.lcb(1, 0), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.estimate(1, 0).0, 2.5 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn lcb_empty_is_error() {
        assert!(matches!(tabular_reward_lcb(&[], 2, 2, 2.0), Err(SplError::EmptyDataset)));
    }

    #[test]
    fn quantile_filter_keeps_smallest() {
        // ten distinct pairs whose Δ increases with the state index
        let n = 10;
        let mean = vec![0.0; n];
        let mut table = PessimisticRewardModel::from_table(n, 1, mean, 0.0, 2.0, 10.0);
        if let Estimator::Tabular(t) = &mut table.estimator {
            t.std = (0..n).map(|i| (i * 7 % 10) as f64 + 0.5).collect();
        }
        let unlabeled: Vec<_> = (0..n).map(|s| tuple(s, 0, None)).collect();
        let ds = OfflineDataset { labeled: vec![], unlabeled, seed: 0 };
        let out = filter_by_uncertainty_quantile(&ds, &table, 0.5).unwrap();
        let mut kept: Vec<f64> = out
            .unlabeled
            .iter()
            .map(|t| table.predict(&t.state, 0).unwrap().delta)
            .collect();
        kept.sort_by(|a, b| a.total_cmp(b));
        assert_eq!(kept, vec![0.5, 1.5, 2.5, 3.5, 4.5]);
        let all = filter_by_uncertainty_quantile(&ds, &table, 1.0).unwrap();
        assert_eq!(all, ds);
    }

    #[test]
    fn forced_infinite_delta_saturates_at_minus_rmax() {
        let m = PessimisticRewardModel::from_table(1, 1, vec![3.0], 0.0, 2.0, 10.0)
            .with_forced_delta(f64::INFINITY);
        let e = m.predict(&State::Discrete(0), 0).unwrap();
        assert_eq!(e.r_spl, -10.0);
    }
}
