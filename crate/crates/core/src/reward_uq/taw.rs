//! Transition-aware penalty `Δ_TAW(s,a) = γ V_max ||P̂(·|s,a) - P(·|s,a)||_1`.

use crate::error::{Result, SplError};
use crate::mdp::{TabularMDP, Transition};

/// Visit counts `N(s, a, s')` behind the empirical kernel `P̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionCounts {
    pub n_states: usize,
    pub n_actions: usize,
    counts: Vec<f64>,
    visits: Vec<f64>,
}

impl TransitionCounts {
    pub fn from_tuples<'a>(
        tuples: impl IntoIterator<Item = &'a Transition>,
        n_states: usize,
        n_actions: usize,
    ) -> Result<Self> {
        let mut counts = vec![0.0; n_states * n_actions * n_states];
        let mut visits = vec![0.0; n_states * n_actions];
        for t in tuples {
            let (s, s2) = (t.state.index()?, t.next_state.index()?);
            if s >= n_states || s2 >= n_states {
                return Err(SplError::InvalidState(format!("state out of range in ({s}, {s2})")));
            }
            if t.action >= n_actions {
                return Err(SplError::InvalidAction {
                    action: t.action,
                    n_actions,
                });
            }
            counts[(s * n_actions + t.action) * n_states + s2] += 1.0;
            visits[s * n_actions + t.action] += 1.0;
        }
        Ok(Self {
            n_states,
            n_actions,
            counts,
            visits,
        })
    }

    /// Pseudo-counts `weight · P(s'|s,a)`, so that `P̂ = P` exactly.
    pub fn from_kernel(mdp: &TabularMDP, weight: f64) -> Self {
        let (ns, na) = (mdp.n_states, mdp.n_actions);
        let mut counts = Vec::with_capacity(ns * na * ns);
        for s in 0..ns {
            for a in 0..na {
                counts.extend(mdp.row(s, a).iter().map(|p| p * weight));
            }
        }
        Self {
            n_states: ns,
            n_actions: na,
            counts,
            visits: vec![weight; ns * na],
        }
    }

    pub fn visits(&self, s: usize, a: usize) -> f64 {
        self.visits[s * self.n_actions + a]
    }

    /// Empirical row; an unvisited pair is a self-loop.
    pub fn p_hat(&self, s: usize, a: usize) -> Vec<f64> {
        let k = s * self.n_actions + a;
        let n = self.visits[k];
        if n > 0.0 {
            self.counts[k * self.n_states..][..self.n_states]
                .iter()
                .map(|c| c / n)
                .collect()
        } else {
            let mut row = vec![0.0; self.n_states];
            row[s] = 1.0;
            row
        }
    }
}

/// What `P̂` is compared against.
#[derive(Debug, Clone, Copy)]
pub enum TawReference<'a> {
    /// The true kernel.
    Truth(&'a TabularMDP),
    /// The high-probability L1 deviation bound at level `alpha`.
    Concentration { alpha: f64 },
}

/// `min(2, sqrt(2 |S| ln(2/α) / max(1, N)))`.
pub fn l1_concentration_bound(n_states: usize, alpha: f64, visits: f64) -> f64 {
    let v = 2.0 * n_states as f64 * (2.0 / alpha).ln() / visits.max(1.0);
    v.sqrt().min(2.0)
}

pub fn taw_penalty(
    counts: &TransitionCounts,
    reference: TawReference<'_>,
    gamma: f64,
    r_max: f64,
    s: usize,
    a: usize,
) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(SplError::InvalidArgument(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    if s >= counts.n_states || a >= counts.n_actions {
        return Err(SplError::InvalidState(format!("pair ({s}, {a}) out of range")));
    }
    let v_max = r_max / (1.0 - gamma);
    let l1 = match reference {
        TawReference::Truth(mdp) => {
            if mdp.n_states != counts.n_states || mdp.n_actions != counts.n_actions {
                return Err(SplError::DimensionMismatch {
                    expected: counts.n_states * counts.n_actions,
                    got: mdp.n_states * mdp.n_actions,
                });
            }
            counts
                .p_hat(s, a)
                .iter()
                .zip(mdp.row(s, a))
                .map(|(p, q)| (p - q).abs())
                .sum()
        }
        TawReference::Concentration { alpha } => {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(SplError::InvalidArgument(format!(
                    "alpha must lie in (0, 1), got {alpha}"
                )));
            }
            l1_concentration_bound(counts.n_states, alpha, counts.visits(s, a))
        }
    };
    Ok(gamma * v_max * l1)
}
