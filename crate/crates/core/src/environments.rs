//! Synthetic environments, behavior policies and offline data generation.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SplError};
use crate::features::InputEncoding;
use crate::mdp::{OfflineDataset, Policy, State, TabularMDP, Transition};
use crate::policy_learning::value_iteration;
use crate::rng;

/// A simulator with discrete actions.
pub trait Environment: Send + Sync {
    fn name(&self) -> &'static str;
    fn n_actions(&self) -> usize;
    fn gamma(&self) -> f64;
    /// Bound on the absolute mean reward used for clipping.
    fn r_max(&self) -> f64;
    /// `Some(|S|)` for finite state spaces.
    fn n_states(&self) -> Option<usize>;
    /// Encoding of `(s, a)` into a real vector for kernels and trees.
    fn encoding(&self) -> InputEncoding;
    fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> State;
    /// Draws `(reward, next_state)` from the environment's conditional laws.
    fn sample<R: Rng + ?Sized>(&self, state: &State, action: usize, rng: &mut R)
        -> Result<(f64, State)>;
    /// `R(s, a) = E[reward | s, a]`.
    fn expected_reward(&self, state: &State, action: usize) -> Result<f64>;
    /// An optimal policy of the true environment.
    fn optimal_policy(&self) -> Result<Policy>;

    fn check_action(&self, action: usize) -> Result<()> {
        if action >= self.n_actions() {
            return Err(SplError::InvalidAction {
                action,
                n_actions: self.n_actions(),
            });
        }
        Ok(())
    }
}

/// Grid moves `(dx, dy)`: stay, up, right, down, left.
pub const GRID_ACTIONS: [(i64, i64); 5] = [(0, 0), (0, 1), (1, 0), (0, -1), (-1, 0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub side: usize,
    pub success_prob: f64,
    pub goal_reward_mean: f64,
    pub goal_reward_std: f64,
    pub other_reward_mean: f64,
    pub other_reward_std: f64,
    pub gamma: f64,
    /// Initial-state distribution over cells; uniform when `None`.
    pub initial: Option<Vec<f64>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            side: 3,
            success_prob: 0.9,
            goal_reward_mean: 10.0,
            goal_reward_std: 1.0,
            other_reward_mean: -0.1,
            // N(-0.1, 10) read as variance 10
            other_reward_std: 10f64.sqrt(),
            gamma: 0.95,
            initial: None,
        }
    }
}

/// The 3×3 grid: goal at `(0, 0)`; the intended move succeeds with
/// probability 0.9 (clipped at the border) and the remaining 0.1 is spread
/// uniformly over the L1-neighbourhood `N(s)`, which includes `s`.
/// The reward law is selected by the realized next state.
#[derive(Debug, Clone)]
pub struct GridEnv {
    pub config: GridConfig,
    initial: Vec<f64>,
    /// `P[s][a][s']`
    kernel: Vec<f64>,
}

impl GridEnv {
    pub fn new(config: GridConfig) -> Result<Self> {
        if config.side < 1 {
            return Err(SplError::InvalidArgument("grid side must be positive".into()));
        }
        if !(0.0..=1.0).contains(&config.success_prob) {
            return Err(SplError::InvalidArgument("success_prob outside [0,1]".into()));
        }
        let n = config.side * config.side;
        let initial = match &config.initial {
            Some(p) => {
                if p.len() != n || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(SplError::InvalidArgument(
                        "grid initial distribution must have one weight per cell summing to 1"
                            .into(),
                    ));
                }
                p.clone()
            }
            None => vec![1.0 / n as f64; n],
        };
        let mut env = Self {
            config,
            initial,
            kernel: Vec::new(),
        };
        let mut kernel = vec![0.0; n * GRID_ACTIONS.len() * n];
        for s in 0..n {
            let hood = env.neighbourhood(s);
            for a in 0..GRID_ACTIONS.len() {
                let row = &mut kernel[(s * GRID_ACTIONS.len() + a) * n..][..n];
                row[env.intended(s, a)] += env.config.success_prob;
                for &b in &hood {
                    row[b] += (1.0 - env.config.success_prob) / hood.len() as f64;
                }
            }
        }
        env.kernel = kernel;
        Ok(env)
    }

    pub fn n_cells(&self) -> usize {
        self.config.side * self.config.side
    }

    pub fn goal(&self) -> usize {
        0
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        x * self.config.side + y
    }

    pub fn cell(&self, s: usize) -> (usize, usize) {
        (s / self.config.side, s % self.config.side)
    }

    /// `s + a`, clipped to the grid.
    pub fn intended(&self, s: usize, a: usize) -> usize {
        let (x, y) = self.cell(s);
        let (dx, dy) = GRID_ACTIONS[a];
        let hi = self.config.side as i64 - 1;
        let nx = (x as i64 + dx).clamp(0, hi) as usize;
        let ny = (y as i64 + dy).clamp(0, hi) as usize;
        self.index(nx, ny)
    }

    /// `N(s) = {b : ||s - b||_1 <= 1}`.
    pub fn neighbourhood(&self, s: usize) -> Vec<usize> {
        let (x, y) = self.cell(s);
        (0..self.n_cells())
            .filter(|&b| {
                let (bx, by) = self.cell(b);
                x.abs_diff(bx) + y.abs_diff(by) <= 1
            })
            .collect()
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.n_cells();
        &self.kernel[(s * GRID_ACTIONS.len() + a) * n..][..n]
    }

    fn reward_moments(&self, s: usize, a: usize) -> (f64, f64) {
        let c = &self.config;
        let p = self.row(s, a)[self.goal()];
        let mean = p * c.goal_reward_mean + (1.0 - p) * c.other_reward_mean;
        let second = p * (c.goal_reward_std.powi(2) + c.goal_reward_mean.powi(2))
            + (1.0 - p) * (c.other_reward_std.powi(2) + c.other_reward_mean.powi(2));
        (mean, (second - mean * mean).max(0.0).sqrt())
    }

    pub fn to_tabular(&self) -> Result<TabularMDP> {
        let n = self.n_cells();
        let na = GRID_ACTIONS.len();
        let mut mean = vec![0.0; n * na];
        let mut std = vec![0.0; n * na];
        for s in 0..n {
            for a in 0..na {
                let (m, sd) = self.reward_moments(s, a);
                mean[s * na + a] = m;
                std[s * na + a] = sd;
            }
        }
        TabularMDP::new(
            n,
            na,
            self.kernel.clone(),
            mean,
            std,
            self.config.gamma,
            self.initial.clone(),
        )
    }

    fn cell_of(&self, state: &State) -> Result<usize> {
        let s = state.index()?;
        if s >= self.n_cells() {
            return Err(SplError::InvalidState(format!(
                "cell {s} outside {}x{} grid",
                self.config.side, self.config.side
            )));
        }
        Ok(s)
    }
}

fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

impl Environment for GridEnv {
    fn name(&self) -> &'static str {
        "grid"
    }

    fn n_actions(&self) -> usize {
        GRID_ACTIONS.len()
    }

    fn gamma(&self) -> f64 {
        self.config.gamma
    }

    fn r_max(&self) -> f64 {
        self.config
            .goal_reward_mean
            .abs()
            .max(self.config.other_reward_mean.abs())
    }

    fn n_states(&self) -> Option<usize> {
        Some(self.n_cells())
    }

    fn encoding(&self) -> InputEncoding {
        InputEncoding::Grid {
            side: self.config.side,
            n_actions: GRID_ACTIONS.len(),
        }
    }

    fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        State::Discrete(sample_categorical(&self.initial, rng))
    }

    fn sample<R: Rng + ?Sized>(
        &self,
        state: &State,
        action: usize,
        rng: &mut R,
    ) -> Result<(f64, State)> {
        self.check_action(action)?;
        let s = self.cell_of(state)?;
        let next = sample_categorical(self.row(s, action), rng);
        let c = &self.config;
        let (mean, std) = if next == self.goal() {
            (c.goal_reward_mean, c.goal_reward_std)
        } else {
            (c.other_reward_mean, c.other_reward_std)
        };
        let z: f64 = StandardNormal.sample(rng);
        Ok((mean + std * z, State::Discrete(next)))
    }

    fn expected_reward(&self, state: &State, action: usize) -> Result<f64> {
        self.check_action(action)?;
        Ok(self.reward_moments(self.cell_of(state)?, action).0)
    }

    fn optimal_policy(&self) -> Result<Policy> {
        optimal_policy(&self.to_tabular()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearGaussianConfig {
    /// Next-state mean is `a · M · s`.
    pub transition_matrix: [[f64; 2]; 2],
    pub transition_std: f64,
    pub reward_scale: f64,
    pub reward_std_idle: f64,
    pub reward_std_active: f64,
    pub gamma: f64,
    pub initial_mean: [f64; 2],
    pub initial_std: f64,
    /// Half-width of the state box over which `R_max` is computed.
    pub state_box: f64,
}

impl Default for LinearGaussianConfig {
    fn default() -> Self {
        Self {
            transition_matrix: [[-0.77, 0.23], [0.23, 0.77]],
            transition_std: 0.1,
            reward_scale: 5.0,
            reward_std_idle: 0.8,
            reward_std_active: 0.1,
            gamma: 0.99,
            initial_mean: [0.0, 0.0],
            initial_std: 1.0,
            state_box: 3.0,
        }
    }
}

/// States in R², actions `{-1, 0, 1}` stored at indices `{0, 1, 2}`.
/// Reward `N(5a(s1+s2), σ²)` with σ = 0.8 for `a = 0` and 0.1 otherwise;
/// next state `N(a·M·s, 0.01·I)`.
#[derive(Debug, Clone)]
pub struct LinearGaussianEnv {
    pub config: LinearGaussianConfig,
}

impl LinearGaussianEnv {
    pub const ACTIONS: [f64; 3] = [-1.0, 0.0, 1.0];

    pub fn new(config: LinearGaussianConfig) -> Self {
        Self { config }
    }

    pub fn action_value(action: usize) -> f64 {
        Self::ACTIONS[action]
    }

    pub fn reward_std(&self, action: usize) -> f64 {
        if Self::ACTIONS[action] == 0.0 {
            self.config.reward_std_idle
        } else {
            self.config.reward_std_active
        }
    }

    /// `Some(index of sign(s1+s2))`, or `None` on the boundary `s1+s2 = 0`.
    pub fn optimal_action(&self, state: &State) -> Result<Option<usize>> {
        let c = self.coords(state)?;
        let sum = c[0] + c[1];
        Ok(if sum > 0.0 {
            Some(2)
        } else if sum < 0.0 {
            Some(0)
        } else {
            None
        })
    }

    pub fn mean_next_state(&self, state: &State, action: usize) -> Result<[f64; 2]> {
        let c = self.coords(state)?;
        let a = Self::ACTIONS[action];
        let m = &self.config.transition_matrix;
        Ok([
            a * (m[0][0] * c[0] + m[0][1] * c[1]),
            a * (m[1][0] * c[0] + m[1][1] * c[1]),
        ])
    }

    fn coords<'a>(&self, state: &'a State) -> Result<&'a [f64]> {
        let c = state.coords()?;
        if c.len() != 2 {
            return Err(SplError::DimensionMismatch {
                expected: 2,
                got: c.len(),
            });
        }
        Ok(c)
    }
}

impl Default for LinearGaussianEnv {
    fn default() -> Self {
        Self::new(LinearGaussianConfig::default())
    }
}

impl Environment for LinearGaussianEnv {
    fn name(&self) -> &'static str {
        "linear-gaussian"
    }

    fn n_actions(&self) -> usize {
        3
    }

    fn gamma(&self) -> f64 {
        self.config.gamma
    }

    fn r_max(&self) -> f64 {
        // max |5a(s1+s2)| over the box is attained at a corner with |a| = 1
        self.config.reward_scale * 2.0 * self.config.state_box
    }

    fn n_states(&self) -> Option<usize> {
        None
    }

    fn encoding(&self) -> InputEncoding {
        InputEncoding::Vector {
            dim: 2,
            n_actions: 3,
        }
    }

    fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        let c = &self.config;
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        State::Continuous(vec![
            c.initial_mean[0] + c.initial_std * z0,
            c.initial_mean[1] + c.initial_std * z1,
        ])
    }

    fn sample<R: Rng + ?Sized>(
        &self,
        state: &State,
        action: usize,
        rng: &mut R,
    ) -> Result<(f64, State)> {
        self.check_action(action)?;
        let mean_r = self.expected_reward(state, action)?;
        let reward = Normal::new(mean_r, self.reward_std(action))
            .map_err(|e| SplError::InvalidArgument(e.to_string()))?
            .sample(rng);
        let mu = self.mean_next_state(state, action)?;
        let sd = self.config.transition_std;
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        Ok((reward, State::Continuous(vec![mu[0] + sd * z0, mu[1] + sd * z1])))
    }

    fn expected_reward(&self, state: &State, action: usize) -> Result<f64> {
        self.check_action(action)?;
        let c = self.coords(state)?;
        Ok(self.config.reward_scale * Self::ACTIONS[action] * (c[0] + c[1]))
    }

    fn optimal_policy(&self) -> Result<Policy> {
        Ok(Policy::SignOfStateSum)
    }
}

/// Either environment, for configuration-driven dispatch.
#[derive(Debug, Clone)]
pub enum Env {
    Grid(GridEnv),
    LinearGaussian(LinearGaussianEnv),
}

macro_rules! dispatch {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            Env::Grid($e) => $body,
            Env::LinearGaussian($e) => $body,
        }
    };
}

impl Environment for Env {
    fn name(&self) -> &'static str {
        dispatch!(self, e => e.name())
    }
    fn n_actions(&self) -> usize {
        dispatch!(self, e => e.n_actions())
    }
    fn gamma(&self) -> f64 {
        dispatch!(self, e => e.gamma())
    }
    fn r_max(&self) -> f64 {
        dispatch!(self, e => e.r_max())
    }
    fn n_states(&self) -> Option<usize> {
        dispatch!(self, e => e.n_states())
    }
    fn encoding(&self) -> InputEncoding {
        dispatch!(self, e => e.encoding())
    }
    fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        dispatch!(self, e => e.initial_state(rng))
    }
    fn sample<R: Rng + ?Sized>(
        &self,
        state: &State,
        action: usize,
        rng: &mut R,
    ) -> Result<(f64, State)> {
        dispatch!(self, e => e.sample(state, action, rng))
    }
    fn expected_reward(&self, state: &State, action: usize) -> Result<f64> {
        dispatch!(self, e => e.expected_reward(state, action))
    }
    fn optimal_policy(&self) -> Result<Policy> {
        dispatch!(self, e => e.optimal_policy())
    }
}

/// Greedy policy of exact value iteration on the true model.
pub fn optimal_policy(mdp: &TabularMDP) -> Result<Policy> {
    let q = value_iteration(mdp, &mdp.reward_mean, 1e-10, 1_000_000)?;
    Ok(Policy::Table {
        actions: q.greedy_table()?,
        n_actions: mdp.n_actions,
    })
}

/// Rolls out `n_trajectories` episodes of length `horizon` under `behavior`.
/// With `record_rewards` the tuples form `L`, otherwise `U`.
pub fn generate_offline_data<E: Environment>(
    env: &E,
    behavior: &Policy,
    n_trajectories: usize,
    horizon: usize,
    record_rewards: bool,
    seed: u64,
) -> Result<OfflineDataset> {
    if n_trajectories < 1 || horizon < 1 {
        return Err(SplError::InvalidArgument(
            "n_trajectories and horizon must be at least 1".into(),
        ));
    }
    if behavior.n_actions() != env.n_actions() {
        return Err(SplError::DimensionMismatch {
            expected: env.n_actions(),
            got: behavior.n_actions(),
        });
    }
    let mut rng = rng::seeded(seed);
    let mut tuples = Vec::with_capacity(n_trajectories * horizon);
    for traj in 0..n_trajectories {
        let mut state = env.initial_state(&mut rng);
        for t in 0..horizon {
            let action = behavior.sample_action(&state, &mut rng)?;
            let (reward, next) = env.sample(&state, action, &mut rng)?;
            tuples.push(Transition {
                traj_id: traj,
                t,
                state,
                action,
                reward: record_rewards.then_some(reward),
                next_state: next.clone(),
            });
            state = next;
        }
    }
    Ok(if record_rewards {
        OfflineDataset {
            labeled: tuples,
            unlabeled: Vec::new(),
            seed,
        }
    } else {
        OfflineDataset {
            labeled: Vec::new(),
            unlabeled: tuples,
            seed,
        }
    })
}

/// Drops each labeled tuple whose action differs from `sign(s1+s2)` with
/// probability `fraction`. Unlabeled tuples are untouched.
pub fn remove_suboptimal_fraction(
    dataset: &OfflineDataset,
    env: &LinearGaussianEnv,
    fraction: f64,
    seed: u64,
) -> Result<OfflineDataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(SplError::InvalidArgument(format!(
            "fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut labeled = Vec::with_capacity(dataset.labeled.len());
    for t in &dataset.labeled {
        let keep = match env.optimal_action(&t.state)? {
            Some(best) if best != t.action => rng.gen::<f64>() >= fraction,
            _ => true,
        };
        if keep {
            labeled.push(t.clone());
        }
    }
    Ok(OfflineDataset {
        labeled,
        unlabeled: dataset.unlabeled.clone(),
        seed: dataset.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid() -> GridEnv {
        GridEnv::new(GridConfig::default()).unwrap()
    }

    #[test]
    fn grid_has_nine_states_and_five_actions() {
        let env = grid();
        assert_eq!((env.n_states(), env.n_actions()), (Some(9), 5));
    }

    #[test]
    fn intended_move_towards_goal() {
        let env = grid();
        let s = env.index(1, 0);
        // left = (-1, 0); the goal is also one of the four cells of N((1,0))
        assert_eq!(env.intended(s, 4), env.goal());
        assert_abs_diff_eq!(env.row(s, 4)[env.goal()], 0.9 + 0.1 / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn grid_kernel_support() {
        let env = grid();
        for s in 0..9 {
            let hood = env.neighbourhood(s);
            for a in 0..5 {
                let row = env.row(s, a);
                assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
                for (b, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        assert!(hood.contains(&b) || b == env.intended(s, a));
                    }
                }
            }
        }
    }

    #[test]
    fn grid_kernel_matches_monte_carlo() {
        let env = grid();
        let s = env.index(1, 1);
        let mut r = rng::seeded(3);
        let mut freq = [0.0; 9];
        let n = 1_000_000;
        for _ in 0..n {
            let (_, next) = env.sample(&State::Discrete(s), 3, &mut r).unwrap();
            freq[next.index().unwrap()] += 1.0 / n as f64;
        }
        for (f, p) in freq.iter().zip(env.row(s, 3)) {
            assert!((f - p).abs() < 0.01, "{f} vs {p}");
        }
    }

    #[test]
    fn grid_reward_follows_realized_next_state() {
        let env = grid();
        let mut r = rng::seeded(4);
        let (mut goal, mut other) = (Vec::new(), Vec::new());
        for _ in 0..20_000 {
            let (rew, next) = env.sample(&State::Discrete(env.index(0, 1)), 3, &mut r).unwrap();
            if next.index().unwrap() == env.goal() {
                goal.push(rew);
            } else {
                other.push(rew);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&goal) - 10.0).abs() < 0.05);
        assert!((mean(&other) + 0.1).abs() < 0.5);
    }

    #[test]
    fn optimal_grid_actions() {
        let env = grid();
        let mdp = env.to_tabular().unwrap();
        let pi = env.optimal_policy().unwrap();
        assert_eq!(pi.greedy_action(&State::Discrete(env.index(1, 0))).unwrap(), 4);
        // at the goal the chosen action maximizes the expected immediate reward
        let g = pi.greedy_action(&State::Discrete(env.goal())).unwrap();
        let best = (0..5).map(|a| mdp.reward_mean.get(0, a)).fold(f64::MIN, f64::max);
        assert_eq!(mdp.reward_mean.get(0, g), best);
        // myopic variant
        let myopic = optimal_policy(&mdp.with_gamma(0.0).unwrap()).unwrap();
        for s in 0..9 {
            let a = myopic.greedy_action(&State::Discrete(s)).unwrap();
            let best = (0..5).map(|b| mdp.reward_mean.get(s, b)).fold(f64::MIN, f64::max);
            assert_eq!(mdp.reward_mean.get(s, a), best);
        }
    }

    #[test]
    fn linear_gaussian_reward_mean_and_std() {
        let env = LinearGaussianEnv::default();
        let s = State::Continuous(vec![1.0, 1.0]);
        assert_eq!(env.expected_reward(&s, 2).unwrap(), 10.0);
        assert_eq!(env.reward_std(1), 0.8);
        assert_eq!(env.reward_std(0), 0.1);
        assert_eq!(env.optimal_action(&State::Continuous(vec![-1.0, 0.5])).unwrap(), Some(0));
        assert_eq!(env.optimal_action(&State::Continuous(vec![-1.0, 1.0])).unwrap(), None);
        assert!(env.sample(&s, 3, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn linear_gaussian_empirical_reward_mean() {
        let env = LinearGaussianEnv::default();
        let s = State::Continuous(vec![0.3, -0.7]);
        let mut r = rng::seeded(5);
        for a in 0..3 {
            let n = 100_000;
            let m = (0..n).map(|_| env.sample(&s, a, &mut r).unwrap().0).sum::<f64>() / n as f64;
            assert!((m - env.expected_reward(&s, a).unwrap()).abs() < 0.02);
        }
    }

    #[test]
    fn linear_gaussian_next_state_mean() {
        let env = LinearGaussianEnv::default();
        let m = env.mean_next_state(&State::Continuous(vec![1.0, 2.0]), 0).unwrap();
        assert_abs_diff_eq!(m[0], -(-0.77 + 0.46), epsilon = 1e-12);
        assert_abs_diff_eq!(m[1], -(0.23 + 1.54), epsilon = 1e-12);
    }

    #[test]
    fn generated_counts_and_determinism() {
        let env = LinearGaussianEnv::default();
        let pi = Policy::Uniform { n_actions: 3 };
        let a = generate_offline_data(&env, &pi, 7, 30, true, 11).unwrap();
        assert_eq!(a.n_labeled(), 210);
        assert_eq!(a, generate_offline_data(&env, &pi, 7, 30, true, 11).unwrap());
        assert_eq!(a.episodes(crate::mdp::DataSlice::Labeled).len(), 7);
        let u = generate_offline_data(&env, &pi, 7, 30, false, 11).unwrap();
        assert!(u.unlabeled.iter().all(|t| t.reward.is_none()));
        assert_eq!(u.n_labeled(), 0);
        assert!(generate_offline_data(&env, &pi, 0, 30, true, 11).is_err());
    }

    #[test]
    fn fully_random_epsilon_greedy_is_uniform() {
        let env = grid();
        let pi = Policy::epsilon_greedy(env.optimal_policy().unwrap(), 1.0).unwrap();
        let d = generate_offline_data(&env, &pi, 50_000, 1, true, 2).unwrap();
        let mut counts = [0.0f64; 5];
        for t in &d.labeled {
            counts[t.action] += 1.0;
        }
        // each count ~ Binomial(50000, 0.2): 4 standard deviations
        let sd = (50_000.0f64 * 0.2 * 0.8).sqrt();
        for c in counts {
            assert!((c - 10_000.0).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn removal_fraction_extremes_and_rate() {
        let env = LinearGaussianEnv::default();
        let pi = Policy::Uniform { n_actions: 3 };
        let d = generate_offline_data(&env, &pi, 60, 30, true, 3).unwrap();
        assert_eq!(remove_suboptimal_fraction(&d, &env, 0.0, 1).unwrap(), d);
        let all = remove_suboptimal_fraction(&d, &env, 1.0, 1).unwrap();
        assert!(all
            .labeled
            .iter()
            .all(|t| env.optimal_action(&t.state).unwrap().is_none_or(|b| b == t.action)));
        let sub = d
            .labeled
            .iter()
            .filter(|t| env.optimal_action(&t.state).unwrap().is_some_and(|b| b != t.action))
            .count();
        let kept = remove_suboptimal_fraction(&d, &env, 0.8, 1).unwrap().n_labeled() - (d.n_labeled() - sub);
        let (mean, sd) = (0.2 * sub as f64, (sub as f64 * 0.2 * 0.8).sqrt());
        assert!(sub >= 1000);
        assert!((kept as f64 - mean).abs() <= 3.0 * sd, "{kept} of {sub}");
        assert!(remove_suboptimal_fraction(&d, &env, 1.5, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn removal_never_drops_optimal_tuples(seed in 0u64..1000, fraction in 0.0f64..=1.0) {
            let env = LinearGaussianEnv::default();
            let pi = Policy::Uniform { n_actions: 3 };
            let d = generate_offline_data(&env, &pi, 4, 30, true, seed).unwrap();
            let out = remove_suboptimal_fraction(&d, &env, fraction, seed + 1).unwrap();
            let optimal = |t: &Transition| env.optimal_action(&t.state).unwrap() == Some(t.action);
            prop_assert_eq!(
                d.labeled.iter().filter(|t| optimal(t)).count(),
                out.labeled.iter().filter(|t| optimal(t)).count()
            );
        }

        #[test]
        fn grid_rows_are_distributions(side in 1usize..6, p in 0.0f64..=1.0) {
            let env = GridEnv::new(GridConfig { side, success_prob: p, ..GridConfig::default() }).unwrap();
            for s in 0..env.n_cells() {
                for a in 0..5 {
                    let row = env.row(s, a);
                    prop_assert!(row.iter().all(|&x| x >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn same_seed_same_dataset(seed in 0u64..10_000) {
            let env = grid();
            let pi = Policy::Uniform { n_actions: 5 };
            let a = generate_offline_data(&env, &pi, 5, 2, true, seed).unwrap();
            let b = generate_offline_data(&env, &pi, 5, 2, true, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
