//! MDP abstractions, offline dataset containers, state-action distributions,
//! discounted visitation, and coverage diagnostics.

use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SplError};
use crate::policy_learning::QFunction;
use crate::rng;

/// Tolerance for probability vectors summing to one.
pub const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum State {
    /// Index into a finite state set.
    Discrete(usize),
    /// Real vector state.
    Continuous(Vec<f64>),
}

impl State {
    pub fn index(&self) -> Result<usize> {
        match self {
            State::Discrete(i) => Ok(*i),
            State::Continuous(_) => Err(SplError::RequiresDiscreteStates),
        }
    }

    pub fn coords(&self) -> Result<&[f64]> {
        match self {
            State::Continuous(v) => Ok(v),
            State::Discrete(_) => Err(SplError::InvalidState(
                "expected a continuous state".into(),
            )),
        }
    }
}

/// One `(s, a, r, s')` tuple. Unlabeled tuples carry `reward: None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub traj_id: usize,
    pub t: usize,
    pub state: State,
    pub action: usize,
    pub reward: Option<f64>,
    pub next_state: State,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSlice {
    Labeled,
    Unlabeled,
    Union,
}

/// Labeled tuples `L` and unlabeled tuples `U`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OfflineDataset {
    pub labeled: Vec<Transition>,
    pub unlabeled: Vec<Transition>,
    pub seed: u64,
}

impl OfflineDataset {
    pub fn new(labeled: Vec<Transition>, unlabeled: Vec<Transition>, seed: u64) -> Result<Self> {
        if let Some(t) = labeled.iter().find(|t| t.reward.is_none()) {
            return Err(SplError::InvalidArgument(format!(
                "labeled tuple (traj {}, t {}) has no reward",
                t.traj_id, t.t
            )));
        }
        let unlabeled = unlabeled
            .into_iter()
            .map(|mut t| {
                t.reward = None;
                t
            })
            .collect();
        Ok(Self {
            labeled,
            unlabeled,
            seed,
        })
    }

    /// Combines the labeled part of `labeled` with the unlabeled part of
    /// `unlabeled`; unlabeled trajectory ids are shifted past the labeled ones.
    pub fn merge(labeled: OfflineDataset, unlabeled: OfflineDataset) -> Self {
        let offset = labeled
            .labeled
            .iter()
            .map(|t| t.traj_id + 1)
            .max()
            .unwrap_or(0);
        let unlabeled_part = unlabeled
            .unlabeled
            .into_iter()
            .chain(unlabeled.labeled)
            .map(|mut t| {
                t.traj_id += offset;
                t.reward = None;
                t
            })
            .collect();
        Self {
            labeled: labeled.labeled,
            unlabeled: unlabeled_part,
            seed: labeled.seed,
        }
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice(&self, which: DataSlice) -> Box<dyn Iterator<Item = &Transition> + '_> {
        match which {
            DataSlice::Labeled => Box::new(self.labeled.iter()),
            DataSlice::Unlabeled => Box::new(self.unlabeled.iter()),
            DataSlice::Union => Box::new(self.labeled.iter().chain(self.unlabeled.iter())),
        }
    }

    /// Index ranges of consecutive tuples sharing a trajectory id.
    pub fn episodes(&self, which: DataSlice) -> Vec<Range<usize>> {
        let tuples: Vec<&Transition> = self.slice(which).collect();
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=tuples.len() {
            if i == tuples.len() || tuples[i].traj_id != tuples[start].traj_id {
                if i > start {
                    out.push(start..i);
                }
                start = i;
            }
        }
        out
    }

    /// Checks every tuple against a finite state/action space.
    pub fn validate_tabular(&self, n_states: usize, n_actions: usize) -> Result<()> {
        for t in self.slice(DataSlice::Union) {
            for s in [&t.state, &t.next_state] {
                let i = s.index()?;
                if i >= n_states {
                    return Err(SplError::InvalidState(format!(
                        "state {i} outside [0, {n_states})"
                    )));
                }
            }
            if t.action >= n_actions {
                return Err(SplError::InvalidAction {
                    action: t.action,
                    n_actions,
                });
            }
        }
        Ok(())
    }

    /// Writes `traj_id,t,s...,a,r,s_next...`; `r` is empty for unlabeled rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let width = self
            .slice(DataSlice::Union)
            .next()
            .map(|t| state_width(&t.state))
            .unwrap_or(1);
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["traj_id".to_string(), "t".to_string()];
        header.extend(state_columns("s", width));
        header.push("a".into());
        header.push("r".into());
        header.extend(state_columns("s_next", width));
        w.write_record(&header)?;
        for t in self.slice(DataSlice::Union) {
            let mut row = vec![t.traj_id.to_string(), t.t.to_string()];
            row.extend(state_fields(&t.state));
            row.push(t.action.to_string());
            row.push(t.reward.map(|r| r.to_string()).unwrap_or_default());
            row.extend(state_fields(&t.next_state));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`OfflineDataset::write_csv`]. A single
    /// state column is read as a discrete state index.
    pub fn read_csv<R: Read>(reader: R, seed: u64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        let n_cols = header.len();
        if n_cols < 6 || (n_cols - 4) % 2 != 0 {
            return Err(SplError::Malformed(format!(
                "dataset header has {n_cols} columns"
            )));
        }
        let width = (n_cols - 4) / 2;
        let parse_f = |s: &str, line: usize| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| SplError::Malformed(format!("line {line}: bad number {s:?}")))
        };
        let parse_state = |fields: &[&str], line: usize| -> Result<State> {
            if width == 1 {
                let v = fields[0].trim().parse::<usize>().map_err(|_| {
                    SplError::Malformed(format!("line {line}: bad state index {:?}", fields[0]))
                })?;
                Ok(State::Discrete(v))
            } else {
                Ok(State::Continuous(
                    fields
                        .iter()
                        .map(|f| parse_f(f, line))
                        .collect::<Result<_>>()?,
                ))
            }
        };
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let f: Vec<&str> = rec.iter().collect();
            let int = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| SplError::Malformed(format!("line {line}: bad integer {s:?}")))
            };
            let state = parse_state(&f[2..2 + width], line)?;
            let action = int(f[2 + width])?;
            let r = f[3 + width].trim();
            let reward = if r.is_empty() {
                None
            } else {
                Some(parse_f(r, line)?)
            };
            let next_state = parse_state(&f[4 + width..4 + 2 * width], line)?;
            let t = Transition {
                traj_id: int(f[0])?,
                t: int(f[1])?,
                state,
                action,
                reward,
                next_state,
            };
            if reward.is_some() {
                labeled.push(t);
            } else {
                unlabeled.push(t);
            }
        }
        Ok(Self {
            labeled,
            unlabeled,
            seed,
        })
    }
}

fn state_width(s: &State) -> usize {
    match s {
        State::Discrete(_) => 1,
        State::Continuous(v) => v.len(),
    }
}

fn state_columns(prefix: &str, width: usize) -> Vec<String> {
    if width == 1 {
        vec![prefix.to_string()]
    } else {
        (0..width).map(|i| format!("{prefix}{i}")).collect()
    }
}

fn state_fields(s: &State) -> Vec<String> {
    match s {
        State::Discrete(i) => vec![i.to_string()],
        State::Continuous(v) => v.iter().map(|x| x.to_string()).collect(),
    }
}

/// A real-valued table indexed by `(state, action)`, row-major in the state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateActionTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl StateActionTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn support(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v > 0.0).collect()
    }
}

/// Finite MDP with explicit kernel `P(s'|s,a)` stored as `[s][a][s']`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMDP {
    pub n_states: usize,
    pub n_actions: usize,
    transition: Vec<f64>,
    pub reward_mean: StateActionTable,
    pub reward_std: StateActionTable,
    pub gamma: f64,
    pub initial: Vec<f64>,
}

impl TabularMDP {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward_mean: Vec<f64>,
        reward_std: Vec<f64>,
        gamma: f64,
        initial: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(SplError::InvalidArgument("empty state or action set".into()));
        }
        let expect = n_states * n_actions * n_states;
        if transition.len() != expect {
            return Err(SplError::DimensionMismatch {
                expected: expect,
                got: transition.len(),
            });
        }
        for (name, t) in [("reward_mean", &reward_mean), ("reward_std", &reward_std)] {
            if t.len() != n_states * n_actions {
                return Err(SplError::InvalidArgument(format!(
                    "{name} has {} entries, expected {}",
                    t.len(),
                    n_states * n_actions
                )));
            }
        }
        if !(gamma >= 0.0 && gamma < 1.0) {
            return Err(SplError::InvalidArgument(format!(
                "gamma must lie in [0, 1), got {gamma}"
            )));
        }
        check_probability_vector(&initial, n_states).map_err(|e| e.context("initial distribution"))?;
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..][..n_states];
                check_probability_vector(row, n_states)
                    .map_err(|e| e.context(format!("P(.|{s},{a})")))?;
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward_mean: StateActionTable {
                n_states,
                n_actions,
                values: reward_mean,
            },
            reward_std: StateActionTable {
                n_states,
                n_actions,
                values: reward_std,
            },
            gamma,
            initial,
        })
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[(s * self.n_actions + a) * self.n_states..][..self.n_states]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.row(s, a)[next]
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.reward_mean.values.clone(),
            self.reward_std.values.clone(),
            gamma,
            self.initial.clone(),
        )
    }

    pub fn with_rewards(&self, reward_mean: StateActionTable) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            reward_mean.values,
            self.reward_std.values.clone(),
            self.gamma,
            self.initial.clone(),
        )
    }

    /// Empirical MDP implied by a set of rewarded tuples: empirical kernel and
    /// mean reward per visited pair; unvisited pairs self-loop with zero reward.
    pub fn empirical(
        tuples: &[Transition],
        n_states: usize,
        n_actions: usize,
        gamma: f64,
    ) -> Result<Self> {
        let mut counts = vec![0.0; n_states * n_actions * n_states];
        let mut visits = vec![0.0; n_states * n_actions];
        let mut rsum = vec![0.0; n_states * n_actions];
        for t in tuples {
            let (s, a, s2) = (t.state.index()?, t.action, t.next_state.index()?);
            let r = t.reward.ok_or_else(|| {
                SplError::InvalidArgument("empirical MDP needs rewarded tuples".into())
            })?;
            counts[(s * n_actions + a) * n_states + s2] += 1.0;
            visits[s * n_actions + a] += 1.0;
            rsum[s * n_actions + a] += r;
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let k = s * n_actions + a;
                let row = &mut counts[k * n_states..][..n_states];
                if visits[k] > 0.0 {
                    row.iter_mut().for_each(|c| *c /= visits[k]);
                    rsum[k] /= visits[k];
                } else {
                    row[s] = 1.0;
                }
            }
        }
        let initial = vec![1.0 / n_states as f64; n_states];
        Self::new(
            n_states,
            n_actions,
            counts,
            rsum,
            vec![0.0; n_states * n_actions],
            gamma,
            initial,
        )
    }
}

fn check_probability_vector(p: &[f64], n: usize) -> Result<()> {
    if p.len() != n {
        return Err(SplError::DimensionMismatch {
            expected: n,
            got: p.len(),
        });
    }
    if p.iter().any(|&x| !(x >= 0.0)) {
        return Err(SplError::InvalidArgument("negative probability".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SplError::InvalidArgument(format!(
            "probabilities sum to {total}"
        )));
    }
    Ok(())
}

/// Action-selection rule.
#[derive(Debug, Clone)]
pub enum Policy {
    /// One action per discrete state.
    Table { actions: Vec<usize>, n_actions: usize },
    Uniform { n_actions: usize },
    /// With probability `epsilon` a uniform action, otherwise the base policy.
    EpsilonGreedy { base: Box<Policy>, epsilon: f64 },
    /// Greedy in a Q-function, ties to the lowest action index.
    Greedy(QFunction),
    /// Two-dimensional states, actions `{-1, 0, 1}` at indices `{0, 1, 2}`:
    /// index 2 when `s1 + s2 > 0`, else index 0.
    SignOfStateSum,
}

impl Policy {
    pub fn epsilon_greedy(base: Policy, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(SplError::InvalidArgument(format!(
                "epsilon must lie in [0, 1], got {epsilon}"
            )));
        }
        Ok(Policy::EpsilonGreedy {
            base: Box::new(base),
            epsilon,
        })
    }

    pub fn n_actions(&self) -> usize {
        match self {
            Policy::Table { n_actions, .. } | Policy::Uniform { n_actions } => *n_actions,
            Policy::EpsilonGreedy { base, .. } => base.n_actions(),
            Policy::Greedy(q) => q.n_actions(),
            Policy::SignOfStateSum => 3,
        }
    }

    /// The most probable action (lowest index among ties).
    pub fn greedy_action(&self, state: &State) -> Result<usize> {
        match self {
            Policy::Table { actions, .. } => {
                let s = state.index()?;
                actions.get(s).copied().ok_or_else(|| {
                    SplError::InvalidState(format!("state {s} outside policy table"))
                })
            }
            Policy::Uniform { .. } => Ok(0),
            Policy::EpsilonGreedy { base, .. } => base.greedy_action(state),
            Policy::Greedy(q) => q.greedy_action(state),
            Policy::SignOfStateSum => {
                let c = state.coords()?;
                if c.len() < 2 {
                    return Err(SplError::InvalidState("expected a 2-d state".into()));
                }
                Ok(if c[0] + c[1] > 0.0 { 2 } else { 0 })
            }
        }
    }

    pub fn probabilities(&self, state: &State) -> Result<Vec<f64>> {
        let n = self.n_actions();
        match self {
            Policy::Uniform { .. } => Ok(vec![1.0 / n as f64; n]),
            Policy::EpsilonGreedy { base, epsilon } => {
                let mut p = base.probabilities(state)?;
                for x in p.iter_mut() {
                    *x = (1.0 - epsilon) * *x + epsilon / n as f64;
                }
                Ok(p)
            }
            _ => {
                let mut p = vec![0.0; n];
                p[self.greedy_action(state)?] = 1.0;
                Ok(p)
            }
        }
    }

    /// Deterministic policies consume no randomness.
    pub fn sample_action<R: Rng + ?Sized>(&self, state: &State, rng: &mut R) -> Result<usize> {
        match self {
            Policy::Uniform { n_actions } => Ok(rng.gen_range(0..*n_actions)),
            Policy::EpsilonGreedy { base, epsilon } => {
                if rng.gen::<f64>() < *epsilon {
                    Ok(rng.gen_range(0..base.n_actions()))
                } else {
                    base.sample_action(state, rng)
                }
            }
            _ => self.greedy_action(state),
        }
    }

    /// Greedy action at every discrete state.
    pub fn to_table(&self, n_states: usize) -> Result<Vec<usize>> {
        (0..n_states)
            .map(|s| self.greedy_action(&State::Discrete(s)))
            .collect()
    }
}

/// `d_D(s,a)`: occurrence frequencies of each pair in the chosen slice.
pub fn empirical_distribution(
    dataset: &OfflineDataset,
    which: DataSlice,
    space: &TabularMDP,
) -> Result<StateActionTable> {
    let mut table = StateActionTable::zeros(space.n_states, space.n_actions);
    let mut n = 0usize;
    for t in dataset.slice(which) {
        let s = t.state.index()?;
        if s >= space.n_states {
            return Err(SplError::InvalidState(format!("state {s} out of range")));
        }
        if t.action >= space.n_actions {
            return Err(SplError::InvalidAction {
                action: t.action,
                n_actions: space.n_actions,
            });
        }
        table.values[s * space.n_actions + t.action] += 1.0;
        n += 1;
    }
    if n == 0 {
        return Err(SplError::EmptyDataset);
    }
    table.values.iter_mut().for_each(|v| *v /= n as f64);
    Ok(table)
}

/// `P_π(s'|s)` for a tabular policy given as per-state action probabilities.
fn policy_kernel(mdp: &TabularMDP, probs: &[Vec<f64>]) -> DMatrix<f64> {
    let n = mdp.n_states;
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        for (a, &pa) in probs[s].iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            for (s2, &q) in mdp.row(s, a).iter().enumerate() {
                p[(s, s2)] += pa * q;
            }
        }
    }
    p
}

fn visitation_from_probs(
    mdp: &TabularMDP,
    probs: &[Vec<f64>],
    initial: &[f64],
) -> Result<StateActionTable> {
    let n = mdp.n_states;
    let p = policy_kernel(mdp, probs);
    let lhs = DMatrix::<f64>::identity(n, n) - p.transpose() * mdp.gamma;
    let rhs = DVector::from_iterator(n, initial.iter().map(|x| x * (1.0 - mdp.gamma)));
    let x = lhs.lu().solve(&rhs).ok_or(SplError::Singular)?;
    let mut table = StateActionTable::zeros(n, mdp.n_actions);
    for s in 0..n {
        for a in 0..mdp.n_actions {
            table.set(s, a, x[s] * probs[s][a]);
        }
    }
    Ok(table)
}

/// `d^π(s,a) = (1-γ) Σ_t γ^t P^π(S_t=s, A_t=a | S_0 ~ initial)`, by a dense
/// solve of `(I - γ P_π^T) x = (1-γ) initial`.
pub fn discounted_visitation(
    mdp: &TabularMDP,
    policy: &Policy,
    initial: &[f64],
) -> Result<StateActionTable> {
    check_probability_vector(initial, mdp.n_states).map_err(|e| e.context("initial"))?;
    if policy.n_actions() != mdp.n_actions {
        return Err(SplError::DimensionMismatch {
            expected: mdp.n_actions,
            got: policy.n_actions(),
        });
    }
    let probs = (0..mdp.n_states)
        .map(|s| policy.probabilities(&State::Discrete(s)))
        .collect::<Result<Vec<_>>>()?;
    visitation_from_probs(mdp, &probs, initial)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Concentration {
    Finite(f64),
    Unbounded,
}

impl Concentration {
    pub fn is_finite(&self) -> bool {
        matches!(self, Concentration::Finite(_))
    }

    pub fn value(&self) -> f64 {
        match self {
            Concentration::Finite(v) => *v,
            Concentration::Unbounded => f64::INFINITY,
        }
    }
}

impl fmt::Display for Concentration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Concentration::Finite(v) => write!(f, "{v}"),
            Concentration::Unbounded => write!(f, "unbounded"),
        }
    }
}

/// `sup_{s,a} numerator(s,a) / denominator(s,a)` over pairs with positive numerator.
pub fn concentration_coefficient(
    numerator: &StateActionTable,
    denominator: &StateActionTable,
) -> Result<Concentration> {
    if numerator.n_states != denominator.n_states || numerator.n_actions != denominator.n_actions
    {
        return Err(SplError::DimensionMismatch {
            expected: numerator.values.len(),
            got: denominator.values.len(),
        });
    }
    let mut sup = 0.0f64;
    for (&num, &den) in numerator.values.iter().zip(&denominator.values) {
        if num > 0.0 {
            if den <= 0.0 {
                return Ok(Concentration::Unbounded);
            }
            sup = sup.max(num / den);
        }
    }
    Ok(Concentration::Finite(sup))
}

/// Policy count above which the sup over deterministic policies is sampled.
pub const MAX_ENUMERATED_POLICIES: u64 = 10_000_000;
pub const SAMPLED_POLICIES: usize = 10_000;

/// Pointwise `max_π d^π(s,a)` over deterministic policies.
#[derive(Debug, Clone)]
pub struct VisitationEnvelope {
    pub table: StateActionTable,
    /// False when policies were sampled; the table is then a lower bound.
    pub exact: bool,
    pub n_policies: u64,
}

pub fn max_visitation_over_policies(
    mdp: &TabularMDP,
    initial: &[f64],
    seed: u64,
) -> Result<VisitationEnvelope> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let total = (na as f64).powi(ns as i32);
    let mut best = StateActionTable::zeros(ns, na);
    let mut assignment = vec![0usize; ns];
    let mut probs: Vec<Vec<f64>> = vec![vec![0.0; na]; ns];
    let mut visit = |assignment: &[usize], best: &mut StateActionTable| -> Result<()> {
        for s in 0..ns {
            probs[s].iter_mut().for_each(|p| *p = 0.0);
            probs[s][assignment[s]] = 1.0;
        }
        let d = visitation_from_probs(mdp, &probs, initial)?;
        for (b, v) in best.values.iter_mut().zip(&d.values) {
            *b = b.max(*v);
        }
        Ok(())
    };
    if total <= MAX_ENUMERATED_POLICIES as f64 {
        let count = total as u64;
        for _ in 0..count {
            visit(&assignment, &mut best)?;
            // odometer increment in base |A|
            for digit in assignment.iter_mut() {
                *digit += 1;
                if *digit < na {
                    break;
                }
                *digit = 0;
            }
        }
        Ok(VisitationEnvelope {
            table: best,
            exact: true,
            n_policies: count,
        })
    } else {
        let mut rng = rng::seeded(seed);
        for _ in 0..SAMPLED_POLICIES {
            for a in assignment.iter_mut() {
                *a = rng.gen_range(0..na);
            }
            visit(&assignment, &mut best)?;
        }
        Ok(VisitationEnvelope {
            table: best,
            exact: false,
            n_policies: SAMPLED_POLICIES as u64,
        })
    }
}

#[derive(Debug, Clone)]
pub struct UniformConcentration {
    pub value: Concentration,
    pub exact: bool,
}

/// `B_D = sup_{π,s,a} d^π(s,a) / d_D(s,a)`.
pub fn uniform_concentration(
    mdp: &TabularMDP,
    initial: &[f64],
    data: &StateActionTable,
    seed: u64,
) -> Result<UniformConcentration> {
    let env = max_visitation_over_policies(mdp, initial, seed)?;
    Ok(UniformConcentration {
        value: concentration_coefficient(&env.table, data)?,
        exact: env.exact,
    })
}

/// Supports of `d_L`, `d_U` and `d_{L∪U}` over a finite space.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiCoverageReport {
    pub n_states: usize,
    pub n_actions: usize,
    pub labeled: Vec<bool>,
    pub unlabeled: Vec<bool>,
    pub union: Vec<bool>,
    /// Every pair present in `L` is present in `L ∪ U`.
    pub labeled_support_in_union: bool,
    /// `L ∪ U` covers every pair.
    pub full_coverage: bool,
}

impl SemiCoverageReport {
    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |v: &[bool]| v.iter().filter(|&&b| b).count();
        (c(&self.labeled), c(&self.unlabeled), c(&self.union))
    }
}

impl fmt::Display for SemiCoverageReport {
    /// Three panels (L, U, L∪U); rows are actions, columns states; `#` marks
    /// pairs present in the data and `.` absent ones.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let panels = [("L", &self.labeled), ("U", &self.unlabeled), ("L∪U", &self.union)];
        for (name, _) in &panels {
            write!(f, "{:<width$}", name, width = self.n_states + 3)?;
        }
        writeln!(f)?;
        for a in (0..self.n_actions).rev() {
            for (_, support) in &panels {
                for s in 0..self.n_states {
                    let c = if support[s * self.n_actions + a] { '#' } else { '.' };
                    write!(f, "{c}")?;
                }
                write!(f, "   ")?;
            }
            writeln!(f)?;
        }
        let (l, u, d) = self.counts();
        write!(
            f,
            "pairs present: L {l}, U {u}, L∪U {d} of {}; full coverage: {}",
            self.n_states * self.n_actions,
            self.full_coverage
        )
    }
}

pub fn check_semi_coverage(
    dataset: &OfflineDataset,
    n_states: usize,
    n_actions: usize,
) -> Result<SemiCoverageReport> {
    let support = |which: DataSlice| -> Result<Vec<bool>> {
        let mut v = vec![false; n_states * n_actions];
        for t in dataset.slice(which) {
            let s = t.state.index()?;
            if s >= n_states || t.action >= n_actions {
                return Err(SplError::InvalidState(format!(
                    "pair ({s}, {}) outside {n_states}x{n_actions}",
                    t.action
                )));
            }
            v[s * n_actions + t.action] = true;
        }
        Ok(v)
    };
    let labeled = support(DataSlice::Labeled)?;
    let unlabeled = support(DataSlice::Unlabeled)?;
    let union = support(DataSlice::Union)?;
    let labeled_support_in_union = labeled.iter().zip(&union).all(|(&l, &d)| !l || d);
    let full_coverage = union.iter().all(|&b| b);
    Ok(SemiCoverageReport {
        n_states,
        n_actions,
        labeled,
        unlabeled,
        union,
        labeled_support_in_union,
        full_coverage,
    })
}
