//! Comparison methods as reward-imputation strategies over shared planners.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::environments::{Env, Environment};
use crate::error::{Result, SplError};
use crate::features::{build_feature_map, Bandwidth, FeatureKind, FeatureMap};
use crate::mdp::{OfflineDataset, Policy, State, StateActionTable, Transition};
use crate::policy_learning::{
    fit_transition_model, fqi, mb_spl, tabular_q_learning, value_iteration, Approximation,
    FqiConfig, MbSplConfig, ModelKind, QFunction, QLearningConfig, QRepr, TrainingSet,
};
use crate::reward_uq::{
    checked_spd_inverse, filter_by_uncertainty_quantile, ini_fit, quad_form, suq_fit,
    tabular_reward_lcb, taw_penalty, z_two_sided, AuxiliaryResiduals, AuxiliarySpec, ForestConfig,
    PessimisticRewardModel, Ridge, Sandwich, SuqConfig, TawReference, TransitionCounts,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SPL")]
    Spl,
    #[serde(rename = "PL")]
    Pl,
    #[serde(rename = "UDS")]
    Uds,
    #[serde(rename = "PDS")]
    Pds,
    NoShare,
    PNoShare,
    Oracle,
    #[serde(rename = "PPL")]
    Ppl,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Spl,
        Method::Pl,
        Method::Uds,
        Method::Pds,
        Method::NoShare,
        Method::PNoShare,
        Method::Oracle,
        Method::Ppl,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Spl => "SPL",
            Method::Pl => "PL",
            Method::Uds => "UDS",
            Method::Pds => "PDS",
            Method::NoShare => "NoShare",
            Method::PNoShare => "PNoShare",
            Method::Oracle => "Oracle",
            Method::Ppl => "PPL",
        }
    }

    /// Whether the planner consumes the unlabeled tuples.
    pub fn uses_unlabeled(&self) -> bool {
        !matches!(self, Method::NoShare | Method::PNoShare | Method::Oracle)
    }

    pub fn needs_tabular(&self) -> bool {
        matches!(self, Method::Oracle | Method::Ppl)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = SplError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| SplError::Config(format!("unknown method '{s}'")))
    }
}

/// Source of `P` for the transition-aware penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TawMode {
    /// True kernel of the environment.
    Oracle,
    /// Concentration bound on the L1 deviation.
    #[default]
    DataDriven,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodSpec {
    pub method: Method,
    /// Uncertainty quantile filter for SPL's unlabeled tuples.
    pub quantile: Option<f64>,
    /// Scale of the PDS Q-penalty.
    pub pds_beta: f64,
    pub taw: TawMode,
}

impl Default for MethodSpec {
    fn default() -> Self {
        Self::new(Method::Spl)
    }
}

impl MethodSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            quantile: None,
            pds_beta: 0.5,
            taw: TawMode::DataDriven,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RewardModelKind {
    /// Per-pair means and standard deviations (finite state spaces).
    Tabular,
    /// Linear regression on a feature map.
    Features {
        features: FeatureKind,
        dim: usize,
        bandwidth: Bandwidth,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxiliaryKind {
    Forest,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlannerKind {
    QLearning,
    Fqi,
    ModelBased,
}

/// Everything shared by the methods of one comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub alpha: f64,
    pub ridge: Ridge,
    pub reward_model: RewardModelKind,
    pub auxiliary: AuxiliaryKind,
    pub residuals: AuxiliaryResiduals,
    pub sandwich: Sandwich,
    pub forest: ForestConfig,
    pub planner: PlannerKind,
    pub q_learning: QLearningConfig,
    pub fqi: FqiConfig,
    pub model_based: MbSplConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            ridge: Ridge::Auto,
            reward_model: RewardModelKind::Tabular,
            auxiliary: AuxiliaryKind::Forest,
            residuals: AuxiliaryResiduals::default(),
            sandwich: Sandwich::default(),
            forest: ForestConfig::default(),
            planner: PlannerKind::QLearning,
            q_learning: QLearningConfig::default(),
            fqi: FqiConfig::default(),
            model_based: MbSplConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Tabular rewards with Q-learning on the grid; `poly2` regression with
    /// linear FQI on the continuous environment.
    pub fn for_env(env: &Env) -> Self {
        match env {
            Env::Grid(_) => Self::default(),
            Env::LinearGaussian(_) => Self {
                reward_model: RewardModelKind::Features {
                    features: FeatureKind::Poly2,
                    dim: 9,
                    bandwidth: Bandwidth::Median,
                },
                planner: PlannerKind::Fqi,
                ..Self::default()
            },
        }
    }
}

/// Reward models fitted once per dataset and shared across methods.
#[derive(Debug, Clone)]
pub struct RewardModels {
    /// Labeled-only: tabular LCB or labeled OLS.
    pub labeled_only: PessimisticRewardModel,
    /// Semi-supervised: tabular LCB or the SUQ fit.
    pub semi: PessimisticRewardModel,
    pub feature_map: Option<FeatureMap>,
    pub min_labeled_reward: f64,
}

impl RewardModels {
    pub fn fit(env: &Env, data: &OfflineDataset, cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        if data.labeled.is_empty() {
            return Err(SplError::EmptyDataset.context("labeled data"));
        }
        let min_labeled_reward = data
            .labeled
            .iter()
            .filter_map(|t| t.reward)
            .fold(f64::INFINITY, f64::min);
        let z = z_two_sided(cfg.alpha);
        match cfg.reward_model {
            RewardModelKind::Tabular => {
                let n_states = env.n_states().ok_or(SplError::RequiresDiscreteStates)?;
                let table = tabular_reward_lcb(&data.labeled, n_states, env.n_actions(), z)?;
                let model = PessimisticRewardModel::tabular(table, cfg.alpha, env.r_max());
                Ok(Self {
                    labeled_only: model.clone(),
                    semi: model,
                    feature_map: None,
                    min_labeled_reward,
                })
            }
            RewardModelKind::Features {
                features,
                dim,
                bandwidth,
            } => {
                let map = build_feature_map(
                    features,
                    env,
                    dim,
                    bandwidth,
                    rng::derive_seed(seed, 4),
                    data,
                )?;
                let labeled_only = ini_fit(&data.labeled, &map, cfg.alpha, cfg.ridge, env.r_max(), cfg.sandwich)?;
                let semi = if data.unlabeled.is_empty() {
                    labeled_only.clone()
                } else {
                    let auxiliary = match cfg.auxiliary {
                        AuxiliaryKind::Forest => AuxiliarySpec::Forest {
                            encoding: env.encoding(),
                            config: ForestConfig {
                                seed: rng::derive_seed(seed, 5),
                                ..cfg.forest.clone()
                            },
                        },
                        AuxiliaryKind::Zero => AuxiliarySpec::Zero,
                    };
                    let suq = SuqConfig {
                        alpha: cfg.alpha,
                        ridge: cfg.ridge,
                        r_max: env.r_max(),
                        auxiliary,
                        residuals: cfg.residuals,
                        sandwich: cfg.sandwich,
                    };
                    suq_fit(&data.labeled, &data.unlabeled, &map, &suq)?
                };
                Ok(Self {
                    labeled_only,
                    semi,
                    feature_map: Some(map),
                    min_labeled_reward,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Diagnostics {
    pub n_training: usize,
    /// Tuples whose reward was imputed or replaced.
    pub n_imputed: usize,
    /// Unlabeled tuples kept after filtering.
    pub n_unlabeled_retained: usize,
    pub mean_imputed_reward: Option<f64>,
    pub mean_delta: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn with_reward(t: &Transition, r: f64) -> Transition {
    Transition {
        reward: Some(r),
        ..t.clone()
    }
}

/// `β V_max sqrt(g'(Λ + λI)⁻¹ g)` with `Λ = Σ_L g g'`.
fn pds_penalty(
    labeled: &[Transition],
    tuples: &[Transition],
    map: &FeatureMap,
    ridge: Ridge,
    beta: f64,
    v_max: f64,
) -> Result<Vec<f64>> {
    let x = crate::reward_uq::design_matrix(map, labeled)?;
    let mut lambda = x.transpose() * &x;
    let l = ridge.resolve(&lambda).max(f64::MIN_POSITIVE);
    for i in 0..lambda.nrows() {
        lambda[(i, i)] += l;
    }
    let inv = checked_spd_inverse(&lambda).map_err(|e| e.context("PDS penalty"))?;
    let mut g = vec![0.0; map.dim()];
    tuples
        .iter()
        .map(|t| {
            map.apply_into(&t.state, t.action, &mut g)?;
            Ok(beta * v_max * quad_form(&inv, &g).max(0.0).sqrt())
        })
        .collect()
}

fn tabular_map(env: &Env) -> Result<FeatureMap> {
    Ok(FeatureMap::TabularOnehot {
        n_states: env.n_states().ok_or(SplError::RequiresDiscreteStates)?,
        n_actions: env.n_actions(),
    })
}

fn v_max(env: &Env) -> f64 {
    env.r_max() / (1.0 - env.gamma())
}

/// Assembles the rewarded tuples a method plans on.
pub fn build_training_set(
    spec: &MethodSpec,
    env: &Env,
    data: &OfflineDataset,
    models: &RewardModels,
    cfg: &PipelineConfig,
) -> Result<(TrainingSet, Diagnostics)> {
    if spec.method.needs_tabular() && env.n_states().is_none() {
        return Err(SplError::UnsupportedMethod {
            method: spec.method.name().into(),
            env: env.name().into(),
        });
    }
    let labeled = data.labeled.clone();
    let mut diag = Diagnostics::default();
    let impute = |tuples: &[Transition], model: &PessimisticRewardModel, pessimistic: bool| {
        let mut out = Vec::with_capacity(tuples.len());
        let mut deltas = Vec::with_capacity(tuples.len());
        for t in tuples {
            let e = model.predict(&t.state, t.action)?;
            out.push(with_reward(t, if pessimistic { e.r_spl } else { e.r_sug }));
            deltas.push(e.delta);
        }
        Ok::<_, SplError>((out, deltas))
    };
    let finish = |mut diag: Diagnostics, set: TrainingSet, imputed: &[Transition], deltas: &[f64]| {
        let r: Vec<f64> = imputed.iter().filter_map(|t| t.reward).collect();
        diag.n_training = set.len();
        diag.n_imputed = imputed.len();
        diag.mean_imputed_reward = mean(&r);
        diag.mean_delta = mean(deltas);
        (set, diag)
    };
    Ok(match spec.method {
        Method::NoShare => finish(diag, TrainingSet::new(labeled), &[], &[]),
        Method::PNoShare => {
            let (imp, d) = impute(&labeled, &models.labeled_only, true)?;
            finish(diag, TrainingSet::new(imp.clone()), &imp, &d)
        }
        Method::Pl => {
            let (imp, d) = impute(&data.unlabeled, &models.labeled_only, false)?;
            diag.n_unlabeled_retained = imp.len();
            let set = TrainingSet::new(labeled.into_iter().chain(imp.iter().cloned()).collect());
            finish(diag, set, &imp, &d)
        }
        Method::Uds => {
            let imp: Vec<Transition> = data
                .unlabeled
                .iter()
                .map(|t| with_reward(t, models.min_labeled_reward))
                .collect();
            diag.n_unlabeled_retained = imp.len();
            let set = TrainingSet::new(labeled.into_iter().chain(imp.iter().cloned()).collect());
            finish(diag, set, &imp, &[])
        }
        Method::Pds => {
            let (imp, d) = impute(&data.unlabeled, &models.labeled_only, true)?;
            diag.n_unlabeled_retained = imp.len();
            let all: Vec<Transition> = labeled.iter().cloned().chain(imp.iter().cloned()).collect();
            let map = match &models.feature_map {
                Some(m) => m.clone(),
                None => tabular_map(env)?,
            };
            let penalty = pds_penalty(&labeled, &all, &map, cfg.ridge, spec.pds_beta, v_max(env))?;
            let set = TrainingSet {
                transitions: all,
                weights: None,
                q_penalty: Some(penalty),
            };
            finish(diag, set, &imp, &d)
        }
        Method::Spl | Method::Oracle | Method::Ppl => {
            let filtered;
            let source = match spec.quantile {
                Some(q) if spec.method == Method::Spl => {
                    filtered = filter_by_uncertainty_quantile(data, &models.semi, q)?;
                    &filtered
                }
                _ => data,
            };
            let (imp, d) = impute(&source.unlabeled, &models.semi, true)?;
            diag.n_unlabeled_retained = imp.len();
            let mut all: Vec<Transition> =
                labeled.iter().cloned().chain(imp.iter().cloned()).collect();
            let mut imp = imp;
            if spec.method == Method::Ppl {
                let Env::Grid(grid) = env else {
                    unreachable!("tabular check above")
                };
                let mdp = grid.to_tabular()?;
                let counts = TransitionCounts::from_tuples(&all, mdp.n_states, mdp.n_actions)?;
                let reference = match spec.taw {
                    TawMode::Oracle => TawReference::Truth(&mdp),
                    TawMode::DataDriven => TawReference::Concentration { alpha: cfg.alpha },
                };
                let z = z_two_sided(cfg.alpha);
                let mut penalty = vec![0.0; mdp.n_states * mdp.n_actions];
                for s in 0..mdp.n_states {
                    for a in 0..mdp.n_actions {
                        penalty[s * mdp.n_actions + a] =
                            taw_penalty(&counts, reference, env.gamma(), env.r_max(), s, a)?;
                    }
                }
                let shift = |t: &mut Transition| -> Result<()> {
                    let k = t.state.index()? * mdp.n_actions + t.action;
                    t.reward = t.reward.map(|r| r - z * penalty[k]);
                    Ok(())
                };
                all.iter_mut().try_for_each(shift)?;
                imp.iter_mut().try_for_each(shift)?;
            }
            finish(diag, TrainingSet::new(all), &imp, &d)
        }
    })
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub policy: Policy,
    pub diagnostics: Diagnostics,
}

fn q_to_policy(q: QFunction) -> Result<Policy> {
    Ok(match &q.repr {
        QRepr::Tabular(t) => Policy::Table {
            actions: q.greedy_table()?,
            n_actions: t.n_actions,
        },
        QRepr::Linear { .. } => Policy::Greedy(q),
    })
}

fn approximation(env: &Env, models: &RewardModels) -> Result<Approximation> {
    Ok(match (&models.feature_map, env.n_states()) {
        (Some(m), _) => Approximation::Linear(m.clone()),
        (None, Some(n_states)) => Approximation::Tabular {
            n_states,
            n_actions: env.n_actions(),
        },
        (None, None) => return Err(SplError::RequiresDiscreteStates),
    })
}

/// Builds the training set and plans on it.
pub fn run_method_with_models(
    spec: &MethodSpec,
    env: &Env,
    data: &OfflineDataset,
    models: &RewardModels,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<MethodOutcome> {
    let (set, diagnostics) = build_training_set(spec, env, data, models, cfg)?;
    let v_max = v_max(env);
    let policy = if spec.method == Method::Oracle {
        let Env::Grid(grid) = env else {
            unreachable!("tabular check in build_training_set")
        };
        let mdp = grid.to_tabular()?;
        let mut reward = StateActionTable::zeros(mdp.n_states, mdp.n_actions);
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                reward.set(s, a, models.semi.predict(&State::Discrete(s), a)?.r_spl);
            }
        }
        q_to_policy(value_iteration(&mdp, &reward, 1e-10, 1_000_000)?)?
    } else {
        match cfg.planner {
            PlannerKind::QLearning => {
                let n_states = env.n_states().ok_or(SplError::RequiresDiscreteStates)?;
                let qc = QLearningConfig {
                    gamma: env.gamma(),
                    v_max,
                    ..cfg.q_learning
                };
                let q = tabular_q_learning(&set, n_states, env.n_actions(), &qc, rng::derive_seed(seed, 6))?;
                q_to_policy(q)?
            }
            PlannerKind::Fqi => {
                let fc = FqiConfig {
                    gamma: env.gamma(),
                    v_max,
                    ..cfg.fqi
                };
                q_to_policy(fqi(&set, &approximation(env, models)?, &fc)?)?
            }
            PlannerKind::ModelBased => {
                if spec.method != Method::Spl {
                    return Err(SplError::UnsupportedMethod {
                        method: format!("{} (model-based)", spec.method),
                        env: env.name().into(),
                    });
                }
                let kind = match env.n_states() {
                    Some(n_states) => ModelKind::Tabular {
                        n_states,
                        n_actions: env.n_actions(),
                    },
                    None => ModelKind::LinearGaussian {
                        state_dim: env.encoding().state_dim(),
                        n_actions: env.n_actions(),
                    },
                };
                let model = fit_transition_model(data.labeled.iter().chain(&data.unlabeled), kind)?;
                let fc = FqiConfig {
                    gamma: env.gamma(),
                    v_max,
                    ..cfg.fqi
                };
                let res = mb_spl(
                    &set,
                    &models.semi,
                    &model,
                    &approximation(env, models)?,
                    &fc,
                    &cfg.model_based,
                    rng::derive_seed(seed, 8),
                )?;
                q_to_policy(res.q)?
            }
        }
    };
    Ok(MethodOutcome {
        policy,
        diagnostics,
    })
}

/// Fits the reward models and runs a single method.
pub fn run_method(
    spec: &MethodSpec,
    env: &Env,
    data: &OfflineDataset,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<MethodOutcome> {
    let models = RewardModels::fit(env, data, cfg, seed)?;
    run_method_with_models(spec, env, data, &models, cfg, seed)
}
