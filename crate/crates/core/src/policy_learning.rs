//! Planners: exact value iteration, fitted Q-iteration, tabular Q-learning and
//! the model-based loop with a learned transition model.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ResultExt, SplError};
use crate::features::FeatureMap;
use crate::mdp::{Policy, State, StateActionTable, TabularMDP, Transition};
use crate::reward_uq::{checked_spd_inverse, PessimisticRewardModel, Ridge};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub enum QRepr {
    Tabular(StateActionTable),
    Linear {
        weights: DVector<f64>,
        features: FeatureMap,
    },
}

/// A state-action value function. Evaluations are clipped to `[-v_max, v_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QFunction {
    pub repr: QRepr,
    pub gamma: f64,
    pub v_max: f64,
    /// Iterations actually run.
    pub iterations: usize,
    pub max_iter: usize,
    pub tol: f64,
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl QFunction {
    pub fn zeros_tabular(n_states: usize, n_actions: usize, gamma: f64, v_max: f64) -> Self {
        Self {
            repr: QRepr::Tabular(StateActionTable::zeros(n_states, n_actions)),
            gamma,
            v_max,
            iterations: 0,
            max_iter: 0,
            tol: 0.0,
        }
    }

    pub fn n_actions(&self) -> usize {
        match &self.repr {
            QRepr::Tabular(t) => t.n_actions,
            QRepr::Linear { features, .. } => features.n_actions(),
        }
    }

    pub fn value(&self, state: &State, action: usize) -> Result<f64> {
        if action >= self.n_actions() {
            return Err(SplError::InvalidAction {
                action,
                n_actions: self.n_actions(),
            });
        }
        let raw = match &self.repr {
            QRepr::Tabular(t) => {
                let s = state.index()?;
                if s >= t.n_states {
                    return Err(SplError::InvalidState(format!("state {s} outside Q table")));
                }
                t.get(s, action)
            }
            QRepr::Linear { weights, features } => {
                let g = features.apply(state, action)?;
                weights.iter().zip(&g).map(|(w, x)| w * x).sum()
            }
        };
        Ok(raw.clamp(-self.v_max, self.v_max))
    }

    pub fn q_values(&self, state: &State) -> Result<Vec<f64>> {
        (0..self.n_actions()).map(|a| self.value(state, a)).collect()
    }

    /// Greedy action; ties go to the lowest index.
    pub fn greedy_action(&self, state: &State) -> Result<usize> {
        Ok(argmax_lowest(&self.q_values(state)?))
    }

    /// Greedy action at every state of a finite state space.
    pub fn greedy_table(&self) -> Result<Vec<usize>> {
        let n_states = match &self.repr {
            QRepr::Tabular(t) => t.n_states,
            QRepr::Linear {
                features: FeatureMap::TabularOnehot { n_states, .. },
                ..
            } => *n_states,
            QRepr::Linear { .. } => return Err(SplError::RequiresDiscreteStates),
        };
        (0..n_states)
            .map(|s| self.greedy_action(&State::Discrete(s)))
            .collect()
    }

    pub fn into_policy(self) -> Policy {
        Policy::Greedy(self)
    }

    /// CSV export with a `#` metadata line.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        let fmap = match &self.repr {
            QRepr::Tabular(_) => "tabular".to_string(),
            QRepr::Linear { features, .. } => features.id(),
        };
        writeln!(
            writer,
            "# gamma={},v_max={},iterations={},max_iter={},tol={},feature_map={}",
            self.gamma, self.v_max, self.iterations, self.max_iter, self.tol, fmap
        )?;
        let mut w = csv::Writer::from_writer(writer);
        match &self.repr {
            QRepr::Tabular(t) => {
                w.write_record(["s", "a", "q"])?;
                for s in 0..t.n_states {
                    for a in 0..t.n_actions {
                        w.write_record([s.to_string(), a.to_string(), t.get(s, a).to_string()])?;
                    }
                }
            }
            QRepr::Linear { weights, .. } => {
                w.write_record(["index", "weight"])?;
                for (i, v) in weights.iter().enumerate() {
                    w.write_record([i.to_string(), v.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `(B Q)(s,a) = r(s,a) + γ Σ_{s'} P(s'|s,a) max_{a'} Q(s',a')`.
fn bellman_optimality(mdp: &TabularMDP, reward: &StateActionTable, q: &StateActionTable) -> StateActionTable {
    let v: Vec<f64> = (0..mdp.n_states)
        .map(|s| {
            (0..mdp.n_actions)
                .map(|a| q.get(s, a))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut out = StateActionTable::zeros(mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let ev: f64 = mdp.row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
            out.set(s, a, reward.get(s, a) + mdp.gamma * ev);
        }
    }
    out
}

/// Iterates the Bellman optimality operator from zero until
/// `||Q - BQ||_∞ ≤ tol`.
pub fn value_iteration(
    mdp: &TabularMDP,
    reward: &StateActionTable,
    tol: f64,
    max_iter: usize,
) -> Result<QFunction> {
    if reward.n_states != mdp.n_states || reward.n_actions != mdp.n_actions {
        return Err(SplError::DimensionMismatch {
            expected: mdp.n_states * mdp.n_actions,
            got: reward.n_states * reward.n_actions,
        });
    }
    let r_max = reward.values.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let v_max = r_max / (1.0 - mdp.gamma);
    let mut q = StateActionTable::zeros(mdp.n_states, mdp.n_actions);
    let mut residual = f64::INFINITY;
    for k in 0..=max_iter {
        let next = bellman_optimality(mdp, reward, &q);
        residual = next
            .values
            .iter()
            .zip(&q.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if residual <= tol {
            return Ok(QFunction {
                repr: QRepr::Tabular(q),
                gamma: mdp.gamma,
                v_max,
                iterations: k,
                max_iter,
                tol,
            });
        }
        q = next;
    }
    Err(SplError::NotConverged {
        iterations: max_iter,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Approximation {
    /// One free parameter per pair: per-pair weighted means.
    Tabular { n_states: usize, n_actions: usize },
    Linear(FeatureMap),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FqiConfig {
    pub gamma: f64,
    pub max_iter: usize,
    /// Relative stopping tolerance on `Σ|Q^{k+1} - Q^k|` over training pairs.
    pub tol: f64,
    pub ridge: Ridge,
    pub v_max: f64,
}

impl Default for FqiConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            max_iter: 500,
            tol: 1e-6,
            ridge: Ridge::Auto,
            v_max: f64::MAX,
        }
    }
}

/// Rewarded tuples for a planner, with optional per-tuple weights and a
/// per-tuple penalty subtracted from every regression target.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub transitions: Vec<Transition>,
    pub weights: Option<Vec<f64>>,
    pub q_penalty: Option<Vec<f64>>,
}

impl TrainingSet {
    pub fn new(transitions: Vec<Transition>) -> Self {
        Self {
            transitions,
            weights: None,
            q_penalty: None,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    fn rewards(&self) -> Result<Vec<f64>> {
        self.transitions
            .iter()
            .map(|t| {
                t.reward.ok_or_else(|| {
                    SplError::InvalidArgument(format!(
                        "training tuple (traj {}, t {}) has no reward",
                        t.traj_id, t.t
                    ))
                })
            })
            .collect()
    }

    /// Rewards minus the optional penalty.
    fn effective_rewards(&self) -> Result<Vec<f64>> {
        let mut r = self.rewards()?;
        if let Some(p) = &self.q_penalty {
            check_len(p.len(), r.len())?;
            r.iter_mut().zip(p).for_each(|(r, p)| *r -= p);
        }
        Ok(r)
    }

    fn weights_or_ones(&self) -> Result<Vec<f64>> {
        match &self.weights {
            Some(w) => {
                check_len(w.len(), self.len())?;
                if w.iter().any(|&x| !(x >= 0.0)) {
                    return Err(SplError::InvalidArgument("negative tuple weight".into()));
                }
                Ok(w.clone())
            }
            None => Ok(vec![1.0; self.len()]),
        }
    }
}

fn check_len(got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(SplError::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn converged(prev: &[f64], next: &[f64], tol: f64) -> bool {
    let diff: f64 = prev.iter().zip(next).map(|(a, b)| (a - b).abs()).sum();
    let scale: f64 = prev.iter().map(|a| a.abs()).sum();
    diff <= tol * scale
}

/// Fitted Q-iteration from `Q⁰ = 0`: regress `r + γ max_a' Q^k(s', a')` onto
/// the approximation class until the relative change over the training pairs
/// falls below `tol` or `max_iter` iterations have run.
pub fn fqi(data: &TrainingSet, approx: &Approximation, config: &FqiConfig) -> Result<QFunction> {
    if data.is_empty() {
        return Err(SplError::EmptyDataset.context("fqi"));
    }
    if config.max_iter < 1 {
        return Err(SplError::InvalidArgument("fqi needs max_iter >= 1".into()));
    }
    if !(0.0..1.0).contains(&config.gamma) {
        return Err(SplError::InvalidArgument(format!(
            "gamma must lie in [0, 1), got {}",
            config.gamma
        )));
    }
    let rewards = data.effective_rewards()?;
    let weights = data.weights_or_ones()?;
    match approx {
        Approximation::Tabular {
            n_states,
            n_actions,
        } => fqi_tabular(data, &rewards, &weights, *n_states, *n_actions, config),
        Approximation::Linear(map) => fqi_linear(data, &rewards, &weights, map, config),
    }
}

fn fqi_tabular(
    data: &TrainingSet,
    rewards: &[f64],
    weights: &[f64],
    n_states: usize,
    n_actions: usize,
    config: &FqiConfig,
) -> Result<QFunction> {
    let idx = data
        .transitions
        .iter()
        .map(|t| {
            let (s, s2) = (t.state.index()?, t.next_state.index()?);
            if s >= n_states || s2 >= n_states || t.action >= n_actions {
                return Err(SplError::InvalidState(format!(
                    "tuple ({s}, {}, {s2}) outside the {n_states}x{n_actions} table",
                    t.action
                )));
            }
            Ok((s * n_actions + t.action, s2))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = n_states * n_actions;
    let mut mass = vec![0.0; k];
    for (&(p, _), w) in idx.iter().zip(weights) {
        mass[p] += w;
    }
    let clip = |x: f64| x.clamp(-config.v_max, config.v_max);
    let mut q = vec![0.0; k];
    let mut on_pairs: Vec<f64> = vec![0.0; idx.len()];
    let mut iterations = 0;
    for it in 1..=config.max_iter {
        iterations = it;
        let v: Vec<f64> = (0..n_states)
            .map(|s| q[s * n_actions..][..n_actions].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut acc = vec![0.0; k];
        for ((&(p, s2), r), w) in idx.iter().zip(rewards).zip(weights) {
            acc[p] += w * (r + config.gamma * v[s2]);
        }
        let next: Vec<f64> = acc
            .iter()
            .zip(&mass)
            .map(|(a, m)| if *m > 0.0 { clip(a / m) } else { 0.0 })
            .collect();
        let next_on_pairs: Vec<f64> = idx.iter().map(|&(p, _)| next[p]).collect();
        let done = converged(&on_pairs, &next_on_pairs, config.tol);
        q = next;
        on_pairs = next_on_pairs;
        if done {
            break;
        }
    }
    Ok(QFunction {
        repr: QRepr::Tabular(StateActionTable {
            n_states,
            n_actions,
            values: q,
        }),
        gamma: config.gamma,
        v_max: config.v_max,
        iterations,
        max_iter: config.max_iter,
        tol: config.tol,
    })
}

fn fqi_linear(
    data: &TrainingSet,
    rewards: &[f64],
    weights: &[f64],
    map: &FeatureMap,
    config: &FqiConfig,
) -> Result<QFunction> {
    let n = data.len();
    let d = map.dim();
    let n_actions = map.n_actions();
    let phi = crate::reward_uq::design_matrix(map, &data.transitions)?;
    // next-state features, one n × d block per action
    let next: Vec<DMatrix<f64>> = (0..n_actions)
        .map(|a| {
            let mut rows = Vec::with_capacity(n * d);
            let mut buf = vec![0.0; d];
            for t in &data.transitions {
                map.apply_into(&t.next_state, a, &mut buf)?;
                rows.extend_from_slice(&buf);
            }
            Ok(DMatrix::from_row_slice(n, d, &rows))
        })
        .collect::<Result<_>>()?;
    let mut phi_w = phi.transpose();
    for (j, mut col) in phi_w.column_iter_mut().enumerate() {
        col *= weights[j];
    }
    let mut gram = &phi_w * &phi;
    let lambda = config.ridge.resolve(&gram);
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let solve = checked_spd_inverse(&gram).context("fqi iteration 1")? * phi_w;

    let clip = |x: f64| x.clamp(-config.v_max, config.v_max);
    let mut w = DVector::zeros(d);
    let mut on_pairs = vec![0.0; n];
    let mut iterations = 0;
    let r = DVector::from_column_slice(rewards);
    for it in 1..=config.max_iter {
        iterations = it;
        let mut v = DVector::from_element(n, f64::NEG_INFINITY);
        for m in &next {
            let qa = m * &w;
            for i in 0..n {
                v[i] = v[i].max(clip(qa[i]));
            }
        }
        let target = &r + v * config.gamma;
        let w_next = &solve * target;
        if w_next.iter().any(|x| !x.is_finite()) {
            return Err(SplError::NotConverged {
                iterations: it,
                residual: f64::INFINITY,
            }
            .context(format!("fqi iteration {it}: non-finite weights")));
        }
        let next_on_pairs: Vec<f64> = (&phi * &w_next).iter().map(|&x| clip(x)).collect();
        let done = converged(&on_pairs, &next_on_pairs, config.tol);
        w = w_next;
        on_pairs = next_on_pairs;
        if done {
            break;
        }
    }
    Ok(QFunction {
        repr: QRepr::Linear {
            weights: w,
            features: map.clone(),
        },
        gamma: config.gamma,
        v_max: config.v_max,
        iterations,
        max_iter: config.max_iter,
        tol: config.tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QLearningConfig {
    pub gamma: f64,
    pub lr: f64,
    pub n_updates: usize,
    pub v_max: f64,
}

impl Default for QLearningConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            lr: 0.001,
            n_updates: 60_000,
            v_max: f64::MAX,
        }
    }
}

/// One-step Q-learning from zero on tuples drawn uniformly with replacement.
pub fn tabular_q_learning(
    data: &TrainingSet,
    n_states: usize,
    n_actions: usize,
    config: &QLearningConfig,
    seed: u64,
) -> Result<QFunction> {
    if data.is_empty() {
        return Err(SplError::EmptyDataset.context("q-learning"));
    }
    if config.n_updates < 1 {
        return Err(SplError::InvalidArgument("q-learning needs n_updates >= 1".into()));
    }
    let rewards = data.effective_rewards()?;
    let idx = data
        .transitions
        .iter()
        .map(|t| {
            let (s, s2) = (t.state.index()?, t.next_state.index()?);
            if s >= n_states || s2 >= n_states || t.action >= n_actions {
                return Err(SplError::InvalidState(format!("tuple ({s}, {}, {s2}) out of range", t.action)));
            }
            Ok((s, t.action, s2))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut q = StateActionTable::zeros(n_states, n_actions);
    let mut rng = rng::seeded(seed);
    for _ in 0..config.n_updates {
        let i = rng.gen_range(0..idx.len());
        let (s, a, s2) = idx[i];
        let v = q.values[s2 * n_actions..][..n_actions]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let old = q.get(s, a);
        let new = old + config.lr * (rewards[i] + config.gamma * v - old);
        q.set(s, a, new.clamp(-config.v_max, config.v_max));
    }
    Ok(QFunction {
        repr: QRepr::Tabular(q),
        gamma: config.gamma,
        v_max: config.v_max,
        iterations: config.n_updates,
        max_iter: config.n_updates,
        tol: 0.0,
    })
}

/// Per-action affine Gaussian model `s' ~ N(A_a s + b_a, diag(σ²_a))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearActionModel {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransitionModel {
    LinearGaussian(Vec<LinearActionModel>),
    /// Empirical kernel `[s][a][s']`; unvisited pairs self-loop.
    Tabular {
        n_states: usize,
        n_actions: usize,
        kernel: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearGaussian { state_dim: usize, n_actions: usize },
    Tabular { n_states: usize, n_actions: usize },
}

/// Least squares fit of the transition model on `(s, a, s')` triples.
pub fn fit_transition_model<'a>(
    tuples: impl IntoIterator<Item = &'a Transition>,
    kind: ModelKind,
) -> Result<TransitionModel> {
    let tuples: Vec<&Transition> = tuples.into_iter().collect();
    match kind {
        ModelKind::Tabular {
            n_states,
            n_actions,
        } => {
            let counts = crate::reward_uq::TransitionCounts::from_tuples(
                tuples.iter().copied(),
                n_states,
                n_actions,
            )?;
            let mut kernel = Vec::with_capacity(n_states * n_actions * n_states);
            for s in 0..n_states {
                for a in 0..n_actions {
                    kernel.extend(counts.p_hat(s, a));
                }
            }
            Ok(TransitionModel::Tabular {
                n_states,
                n_actions,
                kernel,
            })
        }
        ModelKind::LinearGaussian {
            state_dim,
            n_actions,
        } => {
            let p = state_dim + 1;
            let mut models = Vec::with_capacity(n_actions);
            for a in 0..n_actions {
                let rows: Vec<&&Transition> = tuples.iter().filter(|t| t.action == a).collect();
                if rows.len() < p {
                    return Err(SplError::InsufficientData {
                        action: a,
                        count: rows.len(),
                        needed: p,
                    });
                }
                let n = rows.len();
                let mut x = DMatrix::zeros(n, p);
                let mut y = DMatrix::zeros(n, state_dim);
                for (i, t) in rows.iter().enumerate() {
                    let (s, s2) = (t.state.coords()?, t.next_state.coords()?);
                    if s.len() != state_dim || s2.len() != state_dim {
                        return Err(SplError::DimensionMismatch {
                            expected: state_dim,
                            got: s.len(),
                        });
                    }
                    for j in 0..state_dim {
                        x[(i, j)] = s[j];
                        y[(i, j)] = s2[j];
                    }
                    x[(i, state_dim)] = 1.0;
                }
                let gram = x.transpose() * &x;
                let inv = checked_spd_inverse(&gram)
                    .map_err(|e| e.context(format!("transition model for action {a}")))?;
                let coef = inv * x.transpose() * &y; // p × dim
                let resid = &y - &x * &coef;
                let variance = (0..state_dim)
                    .map(|j| resid.column(j).iter().map(|e| e * e).sum::<f64>() / n as f64)
                    .collect();
                models.push(LinearActionModel {
                    matrix: coef.rows(0, state_dim).transpose(),
                    offset: coef.row(state_dim).transpose(),
                    variance,
                });
            }
            Ok(TransitionModel::LinearGaussian(models))
        }
    }
}

impl TransitionModel {
    pub fn n_actions(&self) -> usize {
        match self {
            TransitionModel::LinearGaussian(m) => m.len(),
            TransitionModel::Tabular { n_actions, .. } => *n_actions,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: &State, action: usize, rng: &mut R) -> Result<State> {
        if action >= self.n_actions() {
            return Err(SplError::InvalidAction {
                action,
                n_actions: self.n_actions(),
            });
        }
        match self {
            TransitionModel::LinearGaussian(models) => {
                let m = &models[action];
                let s = DVector::from_column_slice(state.coords()?);
                let mu = &m.matrix * s + &m.offset;
                Ok(State::Continuous(
                    mu.iter()
                        .zip(&m.variance)
                        .map(|(mu, v)| {
                            if *v > 0.0 {
                                mu + v.sqrt() * rng.sample::<f64, _>(StandardNormal)
                            } else {
                                *mu
                            }
                        })
                        .collect(),
                ))
            }
            TransitionModel::Tabular {
                n_states,
                n_actions,
                kernel,
            } => {
                let s = state.index()?;
                let row = &kernel[(s * n_actions + action) * n_states..][..*n_states];
                // a one-hot row consumes no randomness
                if let Some(j) = row.iter().position(|&p| p == 1.0) {
                    return Ok(State::Discrete(j));
                }
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (j, p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return Ok(State::Discrete(j));
                    }
                }
                Ok(State::Discrete(row.iter().rposition(|&p| p > 0.0).unwrap_or(s)))
            }
        }
    }
}

/// `k` synthetic steps from each start state under `policy`, rewarded with
/// the clipped pessimistic reward.
pub fn model_rollout<R: Rng + ?Sized>(
    model: &TransitionModel,
    reward: &PessimisticRewardModel,
    starts: &[State],
    policy: &Policy,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    if k < 1 {
        return Err(SplError::InvalidArgument("rollout horizon must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(starts.len() * k);
    for (i, s0) in starts.iter().enumerate() {
        let mut s = s0.clone();
        for t in 0..k {
            let a = policy.sample_action(&s, rng)?;
            let r = reward.predict(&s, a)?.r_spl;
            let s2 = model.sample(&s, a, rng)?;
            out.push(Transition {
                traj_id: i,
                t,
                state: s,
                action: a,
                reward: Some(r),
                next_state: s2.clone(),
            });
            s = s2;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MbSplConfig {
    /// Rollout horizon.
    pub k: usize,
    /// Start states drawn per outer iteration.
    pub n_starts: usize,
    pub max_outer: usize,
    /// Consecutive unchanged greedy policies needed to stop.
    pub stable_rounds: usize,
    /// Weight of a synthetic tuple relative to a real one.
    pub synthetic_weight: f64,
    /// Exploration rate of the rollout policy.
    pub rollout_epsilon: f64,
}

impl Default for MbSplConfig {
    fn default() -> Self {
        Self {
            k: 5,
            n_starts: 100,
            max_outer: 50,
            stable_rounds: 3,
            synthetic_weight: 1.0,
            rollout_epsilon: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MbSplResult {
    pub q: QFunction,
    pub outer_iterations: usize,
    pub n_synthetic: usize,
}

impl MbSplResult {
    pub fn policy(&self) -> Policy {
        Policy::Greedy(self.q.clone())
    }
}

/// Alternates model rollouts with FQI over the real and synthetic tuples until
/// the greedy actions at the real states stop changing.
pub fn mb_spl(
    real: &TrainingSet,
    reward: &PessimisticRewardModel,
    model: &TransitionModel,
    approx: &Approximation,
    fqi_config: &FqiConfig,
    config: &MbSplConfig,
    seed: u64,
) -> Result<MbSplResult> {
    if real.is_empty() {
        return Err(SplError::EmptyDataset.context("model-based planner"));
    }
    let mut rng = rng::seeded(seed);
    let states: Vec<State> = real.transitions.iter().map(|t| t.state.clone()).collect();
    let n_actions = model.n_actions();
    let real_weights = real.weights_or_ones()?;
    let real_penalty = real.q_penalty.clone();

    let mut q = match approx {
        Approximation::Tabular {
            n_states,
            n_actions,
        } => QFunction::zeros_tabular(*n_states, *n_actions, fqi_config.gamma, fqi_config.v_max),
        Approximation::Linear(map) => QFunction {
            repr: QRepr::Linear {
                weights: DVector::zeros(map.dim()),
                features: map.clone(),
            },
            gamma: fqi_config.gamma,
            v_max: fqi_config.v_max,
            iterations: 0,
            max_iter: fqi_config.max_iter,
            tol: fqi_config.tol,
        },
    };
    let greedy_at = |q: &QFunction| -> Result<Vec<usize>> {
        states.iter().map(|s| q.greedy_action(s)).collect()
    };
    let mut actions = greedy_at(&q)?;
    let mut buffer: Vec<Transition> = Vec::new();
    let mut stable = 0;
    let mut outer = 0;
    while outer < config.max_outer && stable < config.stable_rounds {
        outer += 1;
        let behaviour = Policy::epsilon_greedy(q.clone().into_policy(), config.rollout_epsilon)?;
        let starts: Vec<State> = (0..config.n_starts)
            .map(|_| states[rng.gen_range(0..states.len())].clone())
            .collect();
        buffer.extend(model_rollout(model, reward, &starts, &behaviour, config.k, &mut rng)?);

        let mut data = real.transitions.clone();
        data.extend(buffer.iter().cloned());
        let mut weights = real_weights.clone();
        weights.extend(std::iter::repeat(config.synthetic_weight).take(buffer.len()));
        let q_penalty = real_penalty.as_ref().map(|p| {
            let mut p = p.clone();
            p.extend(std::iter::repeat(0.0).take(buffer.len()));
            p
        });
        let set = TrainingSet {
            transitions: data,
            weights: Some(weights),
            q_penalty,
        };
        q = fqi(&set, approx, fqi_config).map_err(|e| e.context(format!("outer iteration {outer}")))?;
        let next = greedy_at(&q)?;
        if next == actions {
            stable += 1;
        } else {
            stable = 0;
        }
        actions = next;
    }
    debug_assert!(q.n_actions() == n_actions);
    Ok(MbSplResult {
        q,
        outer_iterations: outer,
        n_synthetic: buffer.len(),
    })
}
