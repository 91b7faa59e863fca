//! Ridge-stabilized least squares with the HC0 sandwich covariance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SplError};
use crate::features::FeatureMap;
use crate::mdp::Transition;

/// Largest admissible condition number of `X'X + λI`.
pub const MAX_CONDITION: f64 = 1e12;

/// Scale of the automatic ridge `λ = scale · trace(X'X) / d`.
pub const AUTO_RIDGE_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ridge {
    /// `1e-8 · trace(X'X) / d`
    #[default]
    Auto,
    Fixed(f64),
}

impl Ridge {
    pub fn resolve(&self, gram: &DMatrix<f64>) -> f64 {
        match *self {
            Ridge::Fixed(l) => l,
            Ridge::Auto => AUTO_RIDGE_SCALE * gram.trace() / gram.nrows().max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub theta: DVector<f64>,
    /// Scaled so that `Cov(theta) ≈ sandwich / n`.
    pub sandwich: DMatrix<f64>,
    pub n: usize,
    pub ridge: f64,
}

impl OlsFit {
    pub fn predict(&self, g: &[f64]) -> f64 {
        self.theta.iter().zip(g).map(|(t, x)| t * x).sum()
    }

    /// `g' Σ g` (unscaled quadratic form).
    pub fn quad_form(&self, g: &[f64]) -> f64 {
        quad_form(&self.sandwich, g)
    }

    /// `sqrt(g' Σ g / n)`.
    pub fn delta(&self, g: &[f64]) -> f64 {
        (self.quad_form(g).max(0.0) / self.n as f64).sqrt()
    }
}

pub(crate) fn quad_form(m: &DMatrix<f64>, g: &[f64]) -> f64 {
    let d = g.len();
    let mut acc = 0.0;
    for j in 0..d {
        let gj = g[j];
        if gj == 0.0 {
            continue;
        }
        let col = m.column(j);
        let mut s = 0.0;
        for i in 0..d {
            s += g[i] * col[i];
        }
        acc += s * gj;
    }
    acc
}

/// Inverse of a symmetric positive definite matrix after checking its
/// condition number.
pub(crate) fn checked_spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(SplError::RankDeficient { condition });
    }
    let chol = a.clone().cholesky().ok_or(SplError::RankDeficient { condition })?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Form of the sandwich "meat".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sandwich {
    /// `Σ_i g_i g_i' e_i²`: rows treated as independent.
    #[default]
    Hc0,
    /// `Σ_c (Σ_{i∈c} g_i e_i)(Σ_{i∈c} g_i e_i)'` with one cluster per
    /// trajectory, for residuals that are correlated along a trajectory.
    Trajectory,
}

/// `θ = (X'X + λI)⁻¹ X'y` and the HC0 sandwich
/// `n (X'X + λI)⁻¹ (Σ g g' e²) (X'X + λI)⁻¹`.
pub fn fit_ols_sandwich(targets: &[f64], features: &DMatrix<f64>, ridge: Ridge) -> Result<OlsFit> {
    fit_ols_clustered(targets, features, ridge, None)
}

/// As [`fit_ols_sandwich`], with the meat summed within `clusters` (one label
/// per row) when given.
pub fn fit_ols_clustered(
    targets: &[f64],
    features: &DMatrix<f64>,
    ridge: Ridge,
    clusters: Option<&[usize]>,
) -> Result<OlsFit> {
    let (n, d) = features.shape();
    if n < 1 || d < 1 {
        return Err(SplError::EmptyDataset.context("least squares needs n >= 1 and d >= 1"));
    }
    if targets.len() != n {
        return Err(SplError::DimensionMismatch {
            expected: n,
            got: targets.len(),
        });
    }
    let lambda = ridge.resolve(&(features.transpose() * features));
    if lambda < 0.0 {
        return Err(SplError::InvalidArgument(format!("ridge must be >= 0, got {lambda}")));
    }
    let y = DVector::from_column_slice(targets);
    let xt = features.transpose();
    let mut gram = &xt * features;
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let inv = checked_spd_inverse(&gram)?;
    let theta = &inv * (&xt * &y);
    let resid = &y - features * &theta;
    let meat = match clusters {
        None => {
            // X' diag(e²) X
            let mut weighted = features.clone();
            for (i, mut row) in weighted.row_iter_mut().enumerate() {
                row *= resid[i] * resid[i];
            }
            &xt * &weighted
        }
        Some(labels) => {
            if labels.len() != n {
                return Err(SplError::DimensionMismatch {
                    expected: n,
                    got: labels.len(),
                });
            }
            let mut scores: std::collections::BTreeMap<usize, DVector<f64>> = Default::default();
            for (i, &c) in labels.iter().enumerate() {
                let score = scores.entry(c).or_insert_with(|| DVector::zeros(d));
                *score += features.row(i).transpose() * resid[i];
            }
            let mut meat = DMatrix::zeros(d, d);
            for u in scores.values() {
                meat += u * u.transpose();
            }
            meat
        }
    };
    let s = &inv * meat * &inv * n as f64;
    let sandwich = (&s + s.transpose()) * 0.5;
    Ok(OlsFit {
        theta,
        sandwich,
        n,
        ridge: lambda,
    })
}

/// Stacks `g(s, a)` for each tuple into an `n × d` matrix.
pub fn design_matrix<'a>(
    map: &FeatureMap,
    tuples: impl IntoIterator<Item = &'a Transition>,
) -> Result<DMatrix<f64>> {
    let d = map.dim();
    let mut data = Vec::new();
    let mut buf = vec![0.0; d];
    let mut n = 0;
    for t in tuples {
        map.apply_into(&t.state, t.action, &mut buf)?;
        data.extend_from_slice(&buf);
        n += 1;
    }
    Ok(DMatrix::from_row_slice(n, d, &data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    #[test]
    fn singleton_clusters_reproduce_hc0() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, 1.0, -1.0, 1.0, 2.0, 1.0, 0.1]);
        let y = [1.0, -0.5, 2.5, 0.0];
        let a = fit_ols_sandwich(&y, &x, Ridge::Fixed(0.0)).unwrap();
        let b = fit_ols_clustered(&y, &x, Ridge::Fixed(0.0), Some(&[3, 1, 0, 2])).unwrap();
        assert!((a.sandwich - b.sandwich).abs().max() < 1e-12);
    }

    #[test]
    fn one_cluster_meat_is_the_outer_score() {
        // intercept-only, targets {1,2,3}: residuals sum to zero, so a single
        // cluster has a zero score and a zero sandwich
        let x = DMatrix::from_element(3, 1, 1.0);
        let f = fit_ols_clustered(&[1.0, 2.0, 3.0], &x, Ridge::Fixed(0.0), Some(&[0, 0, 0])).unwrap();
        assert!(f.sandwich[(0, 0)].abs() < 1e-12);
        // two clusters {1,2} and {3}: scores -1 and 1 -> meat 2, sandwich 3·2/9
        let f = fit_ols_clustered(&[1.0, 2.0, 3.0], &x, Ridge::Fixed(0.0), Some(&[0, 0, 1])).unwrap();
        assert!((f.sandwich[(0, 0)] - 3.0 * 2.0 / 9.0).abs() < 1e-12);
    }


    #[test]
    fn intercept_only_matches_hand_computation() {
        let x = DMatrix::from_element(3, 1, 1.0);
        let fit = fit_ols_sandwich(&[1.0, 2.0, 3.0], &x, Ridge::Fixed(0.0)).unwrap();
        assert_abs_diff_eq!(fit.theta[0], 2.0, epsilon = 1e-12);
        // n · (1/3) · (1 + 0 + 1) · (1/3) = 2/3
        assert_abs_diff_eq!(fit.sandwich[(0, 0)], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.delta(&[1.0]), 0.4714045207910317, epsilon = 1e-12);
    }

    #[test]
    fn noiseless_linear_data_has_zero_sandwich() {
        let rows: Vec<f64> = (0..20)
            .flat_map(|i| {
                let x = i as f64 / 7.0;
                [1.0, x, (x * 3.0).sin()]
            })
            .collect();
        let x = DMatrix::from_row_slice(20, 3, &rows);
        let y: Vec<f64> = x.row_iter().map(|r| 0.5 - 2.0 * r[1] + 3.0 * r[2]).collect();
        let fit = fit_ols_sandwich(&y, &x, Ridge::Fixed(0.0)).unwrap();
        assert!(fit.sandwich.iter().all(|v| v.abs() < 1e-18));
        assert_abs_diff_eq!(fit.delta(&[1.0, 0.3, -0.2]), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn duplicated_columns_are_rank_deficient() {
        let rows: Vec<f64> = (0..10).flat_map(|i| [i as f64, i as f64]).collect();
        let x = DMatrix::from_row_slice(10, 2, &rows);
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let err = fit_ols_sandwich(&y, &x, Ridge::Fixed(0.0)).unwrap_err();
        assert!(matches!(err, SplError::RankDeficient { .. }));
        assert!(err.to_string().contains("increase ridge"));
        // the automatic stabilizer makes the same design solvable
        assert!(fit_ols_sandwich(&y, &x, Ridge::Auto).is_ok());
    }

    #[test]
    fn sandwich_is_symmetric_psd() {
        let rows: Vec<f64> = (0..40)
            .flat_map(|i| {
                let x = (i as f64 * 0.37).sin();
                [1.0, x, x * x]
            })
            .collect();
        let x = DMatrix::from_row_slice(40, 3, &rows);
        let y: Vec<f64> = (0..40).map(|i| ((i * 7919) % 13) as f64 / 13.0).collect();
        let fit = fit_ols_sandwich(&y, &x, Ridge::Auto).unwrap();
        let asym = (&fit.sandwich - fit.sandwich.transpose()).abs().max();
        assert!(asym <= 1e-10);
        let min_eig = fit
            .sandwich
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .min();
        assert!(min_eig >= -1e-8);
    }
}
