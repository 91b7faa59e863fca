//! Feature maps `g(s, a) ∈ R^d` for reward and Q-function regression.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::environments::Environment;
use crate::error::{Result, SplError};
use crate::mdp::{DataSlice, OfflineDataset, State};
use crate::rng;

/// Real-vector encoding of a state-action pair: state coordinates followed by
/// a one-hot action indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputEncoding {
    /// Discrete cell index `x * side + y` mapped to `(x, y)`.
    Grid { side: usize, n_actions: usize },
    Vector { dim: usize, n_actions: usize },
}

impl InputEncoding {
    pub fn n_actions(&self) -> usize {
        match self {
            InputEncoding::Grid { n_actions, .. } | InputEncoding::Vector { n_actions, .. } => {
                *n_actions
            }
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            InputEncoding::Grid { .. } => 2,
            InputEncoding::Vector { dim, .. } => *dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim() + self.n_actions()
    }

    pub fn encode_into(&self, state: &State, action: usize, out: &mut [f64]) -> Result<()> {
        if action >= self.n_actions() {
            return Err(SplError::InvalidAction {
                action,
                n_actions: self.n_actions(),
            });
        }
        if out.len() != self.input_dim() {
            return Err(SplError::DimensionMismatch {
                expected: self.input_dim(),
                got: out.len(),
            });
        }
        match self {
            InputEncoding::Grid { side, .. } => {
                let s = state.index()?;
                if s >= side * side {
                    return Err(SplError::InvalidState(format!("cell {s} outside grid")));
                }
                out[0] = (s / side) as f64;
                out[1] = (s % side) as f64;
            }
            InputEncoding::Vector { dim, .. } => {
                let c = state.coords()?;
                if c.len() != *dim {
                    return Err(SplError::DimensionMismatch {
                        expected: *dim,
                        got: c.len(),
                    });
                }
                out[..*dim].copy_from_slice(c);
            }
        }
        let k = self.state_dim();
        out[k..].iter_mut().for_each(|v| *v = 0.0);
        out[k + action] = 1.0;
        Ok(())
    }

    pub fn encode(&self, state: &State, action: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.input_dim()];
        self.encode_into(state, action, &mut out)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Rff,
    Poly2,
    TabularOnehot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    /// Median pairwise input distance over sampled pairs of the union data.
    Median,
    Explicit(f64),
}

/// Number of pairs sampled by the median heuristic.
pub const MEDIAN_PAIRS: usize = 1000;

/// Random Fourier features `sqrt(2/d) cos(Ω x + b)` approximating the
/// Gaussian kernel `exp(-||x - y||² / (2 h²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct RffMap {
    pub encoding: InputEncoding,
    pub dim: usize,
    /// `dim × input_dim`, row-major.
    pub omega: Vec<f64>,
    pub phase: Vec<f64>,
    pub bandwidth: f64,
    pub seed: u64,
}

impl RffMap {
    pub fn new(encoding: InputEncoding, dim: usize, bandwidth: f64, seed: u64) -> Result<Self> {
        if dim < 1 {
            return Err(SplError::InvalidArgument("feature dimension must be >= 1".into()));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(SplError::InvalidArgument(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        let p = encoding.input_dim();
        let mut rng = rng::seeded(seed);
        let omega = (0..dim * p)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z / bandwidth
            })
            .collect();
        let phase = (0..dim).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        Ok(Self {
            encoding,
            dim,
            omega,
            phase,
            bandwidth,
            seed,
        })
    }

    pub fn apply_input(&self, x: &[f64], out: &mut [f64]) {
        let p = x.len();
        let scale = (2.0 / self.dim as f64).sqrt();
        for (j, o) in out.iter_mut().enumerate() {
            let w = &self.omega[j * p..(j + 1) * p];
            let dot: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            *o = scale * (dot + self.phase[j]).cos();
        }
    }

    /// The kernel the features approximate.
    pub fn kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        (-d2 / (2.0 * self.bandwidth * self.bandwidth)).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    Rff(RffMap),
    /// Nine terms over `s = (s1, s2)` and the action coded as `(a1, a2)` with
    /// `-1 ↦ (1,0)`, `0 ↦ (0,0)`, `1 ↦ (0,1)`:
    /// `s1, s2, s1², s2², s1·s2, a1·s1, a1·s2, a2·s1, a2·s2`.
    Poly2,
    TabularOnehot { n_states: usize, n_actions: usize },
}

pub const POLY2_DIM: usize = 9;

impl FeatureMap {
    pub fn dim(&self) -> usize {
        match self {
            FeatureMap::Rff(m) => m.dim,
            FeatureMap::Poly2 => POLY2_DIM,
            FeatureMap::TabularOnehot {
                n_states,
                n_actions,
            } => n_states * n_actions,
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            FeatureMap::Rff(m) => m.encoding.n_actions(),
            FeatureMap::Poly2 => 3,
            FeatureMap::TabularOnehot { n_actions, .. } => *n_actions,
        }
    }

    pub fn kind(&self) -> FeatureKind {
        match self {
            FeatureMap::Rff(_) => FeatureKind::Rff,
            FeatureMap::Poly2 => FeatureKind::Poly2,
            FeatureMap::TabularOnehot { .. } => FeatureKind::TabularOnehot,
        }
    }

    /// Short identifier used in export metadata.
    pub fn id(&self) -> String {
        match self {
            FeatureMap::Rff(m) => format!("rff-d{}-seed{}-bw{}", m.dim, m.seed, m.bandwidth),
            FeatureMap::Poly2 => "poly2".into(),
            FeatureMap::TabularOnehot {
                n_states,
                n_actions,
            } => format!("onehot-{n_states}x{n_actions}"),
        }
    }

    pub fn apply_into(&self, state: &State, action: usize, out: &mut [f64]) -> Result<()> {
        if out.len() != self.dim() {
            return Err(SplError::DimensionMismatch {
                expected: self.dim(),
                got: out.len(),
            });
        }
        match self {
            FeatureMap::Rff(m) => {
                let x = m.encoding.encode(state, action)?;
                m.apply_input(&x, out);
            }
            FeatureMap::Poly2 => {
                let c = state.coords()?;
                if c.len() != 2 {
                    return Err(SplError::DimensionMismatch {
                        expected: 2,
                        got: c.len(),
                    });
                }
                let (a1, a2) = match action {
                    0 => (1.0, 0.0),
                    1 => (0.0, 0.0),
                    2 => (0.0, 1.0),
                    _ => {
                        return Err(SplError::InvalidAction {
                            action,
                            n_actions: 3,
                        })
                    }
                };
                let (s1, s2) = (c[0], c[1]);
                out.copy_from_slice(&[
                    s1,
                    s2,
                    s1 * s1,
                    s2 * s2,
                    s1 * s2,
                    a1 * s1,
                    a1 * s2,
                    a2 * s1,
                    a2 * s2,
                ]);
            }
            FeatureMap::TabularOnehot {
                n_states,
                n_actions,
            } => {
                let s = state.index()?;
                if s >= *n_states {
                    return Err(SplError::InvalidState(format!("state {s} out of range")));
                }
                if action >= *n_actions {
                    return Err(SplError::InvalidAction {
                        action,
                        n_actions: *n_actions,
                    });
                }
                out.iter_mut().for_each(|v| *v = 0.0);
                out[s * n_actions + action] = 1.0;
            }
        }
        Ok(())
    }

    pub fn apply(&self, state: &State, action: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.apply_into(state, action, &mut out)?;
        Ok(out)
    }

    /// Writes a `field,index,value` sidecar sufficient to rebuild the map exactly.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["field", "index", "value"])?;
        let mut put = |field: &str, i: usize, v: String| w.write_record([field, &i.to_string(), &v]);
        match self {
            FeatureMap::Rff(m) => {
                put("kind", 0, "rff".into())?;
                let (tag, a, b) = match m.encoding {
                    InputEncoding::Grid { side, n_actions } => ("grid", side, n_actions),
                    InputEncoding::Vector { dim, n_actions } => ("vector", dim, n_actions),
                };
                put("encoding", 0, tag.into())?;
                put("encoding", 1, a.to_string())?;
                put("encoding", 2, b.to_string())?;
                put("dim", 0, m.dim.to_string())?;
                put("seed", 0, m.seed.to_string())?;
                put("bandwidth", 0, m.bandwidth.to_string())?;
                for (i, v) in m.omega.iter().enumerate() {
                    put("omega", i, v.to_string())?;
                }
                for (i, v) in m.phase.iter().enumerate() {
                    put("phase", i, v.to_string())?;
                }
            }
            FeatureMap::Poly2 => put("kind", 0, "poly2".into())?,
            FeatureMap::TabularOnehot {
                n_states,
                n_actions,
            } => {
                put("kind", 0, "tabular-onehot".into())?;
                put("n_states", 0, n_states.to_string())?;
                put("n_actions", 0, n_actions.to_string())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut rows: Vec<(String, String)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(SplError::Malformed("feature sidecar rows need 3 fields".into()));
            }
            rows.push((rec[0].to_string(), rec[2].to_string()));
        }
        let values = |field: &str| -> Vec<&str> {
            rows.iter()
                .filter(|(f, _)| f == field)
                .map(|(_, v)| v.as_str())
                .collect()
        };
        let one = |field: &str| -> Result<String> {
            values(field)
                .first()
                .map(|s| s.to_string())
                .ok_or_else(|| SplError::Malformed(format!("missing field {field}")))
        };
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| SplError::Malformed(format!("bad number {s:?}")))
        };
        let int = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| SplError::Malformed(format!("bad integer {s:?}")))
        };
        match one("kind")?.as_str() {
            "poly2" => Ok(FeatureMap::Poly2),
            "tabular-onehot" => Ok(FeatureMap::TabularOnehot {
                n_states: int(&one("n_states")?)?,
                n_actions: int(&one("n_actions")?)?,
            }),
            "rff" => {
                let enc = values("encoding");
                if enc.len() != 3 {
                    return Err(SplError::Malformed("encoding needs 3 entries".into()));
                }
                let (a, b) = (int(enc[1])?, int(enc[2])?);
                let encoding = match enc[0] {
                    "grid" => InputEncoding::Grid {
                        side: a,
                        n_actions: b,
                    },
                    "vector" => InputEncoding::Vector {
                        dim: a,
                        n_actions: b,
                    },
                    other => return Err(SplError::Malformed(format!("unknown encoding {other}"))),
                };
                let dim = int(&one("dim")?)?;
                let omega = values("omega").into_iter().map(num).collect::<Result<Vec<_>>>()?;
                let phase = values("phase").into_iter().map(num).collect::<Result<Vec<_>>>()?;
                if omega.len() != dim * encoding.input_dim() || phase.len() != dim {
                    return Err(SplError::Malformed("rff parameter sizes do not match".into()));
                }
                Ok(FeatureMap::Rff(RffMap {
                    encoding,
                    dim,
                    omega,
                    phase,
                    bandwidth: num(&one("bandwidth")?)?,
                    seed: int(&one("seed")?)? as u64,
                }))
            }
            other => Err(SplError::Malformed(format!("unknown feature kind {other}"))),
        }
    }
}

/// Median of Euclidean distances between encoded inputs over randomly drawn
/// pairs of union tuples; falls back to 1 when degenerate.
pub fn median_heuristic(
    encoding: &InputEncoding,
    data: &OfflineDataset,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    let inputs = data
        .slice(DataSlice::Union)
        .map(|t| encoding.encode(&t.state, t.action))
        .collect::<Result<Vec<_>>>()?;
    if inputs.len() < 2 {
        return Err(SplError::EmptyDataset.context("median heuristic needs two tuples"));
    }
    let mut rng = rng::seeded(seed);
    let mut dists: Vec<f64> = (0..n_pairs)
        .map(|_| {
            let i = rng.gen_range(0..inputs.len());
            let mut j = rng.gen_range(0..inputs.len() - 1);
            if j >= i {
                j += 1;
            }
            inputs[i]
                .iter()
                .zip(&inputs[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    dists.sort_by(|a, b| a.total_cmp(b));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}

pub fn build_feature_map<E: Environment>(
    kind: FeatureKind,
    env: &E,
    d: usize,
    bandwidth: Bandwidth,
    seed: u64,
    data: &OfflineDataset,
) -> Result<FeatureMap> {
    match kind {
        FeatureKind::Rff => {
            if d < 1 {
                return Err(SplError::InvalidArgument("feature dimension must be >= 1".into()));
            }
            let encoding = env.encoding();
            let h = match bandwidth {
                Bandwidth::Explicit(h) => h,
                Bandwidth::Median => {
                    median_heuristic(&encoding, data, MEDIAN_PAIRS, rng::derive_seed(seed, 1))?
                }
            };
            Ok(FeatureMap::Rff(RffMap::new(encoding, d, h, seed)?))
        }
        FeatureKind::Poly2 => {
            if env.encoding() != (InputEncoding::Vector { dim: 2, n_actions: 3 }) {
                return Err(SplError::InvalidArgument(
                    "poly2 features need 2-d states and three actions".into(),
                ));
            }
            Ok(FeatureMap::Poly2)
        }
        FeatureKind::TabularOnehot => match env.n_states() {
            Some(n_states) => Ok(FeatureMap::TabularOnehot {
                n_states,
                n_actions: env.n_actions(),
            }),
            None => Err(SplError::RequiresDiscreteStates),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{GridConfig, GridEnv, LinearGaussianEnv};
    use proptest::prelude::*;
    use rand::Rng;

    fn vector_rff(dim: usize, h: f64, seed: u64) -> RffMap {
        RffMap::new(InputEncoding::Vector { dim: 2, n_actions: 3 }, dim, h, seed).unwrap()
    }

    #[test]
    fn onehot_on_the_grid() {
        let env = GridEnv::new(GridConfig::default()).unwrap();
        let m = build_feature_map(FeatureKind::TabularOnehot, &env, 0, Bandwidth::Median, 0, &OfflineDataset::default())
            .unwrap();
        assert_eq!(m.dim(), 45);
        let g = m.apply(&State::Discrete(4), 3).unwrap();
        assert_eq!(g.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(g.iter().sum::<f64>(), 1.0);
        assert_eq!(g[4 * 5 + 3], 1.0);
    }

    #[test]
    fn poly2_terms() {
        let m = FeatureMap::Poly2;
        assert_eq!(m.dim(), 9);
        for a in 0..3 {
            assert!(m.apply(&State::Continuous(vec![0.0, 0.0]), a).unwrap().iter().all(|&v| v == 0.0));
        }
        let g = m.apply(&State::Continuous(vec![2.0, 3.0]), 0).unwrap();
        assert_eq!(g, [2.0, 3.0, 4.0, 9.0, 6.0, 2.0, 3.0, 0.0, 0.0]);
        let g = m.apply(&State::Continuous(vec![2.0, 3.0]), 2).unwrap();
        assert_eq!(&g[5..], [0.0, 0.0, 2.0, 3.0]);
        assert!(m.apply(&State::Continuous(vec![1.0]), 0).is_err());
        assert!(m.apply(&State::Continuous(vec![1.0, 1.0]), 3).is_err());
    }

    #[test]
    fn poly2_needs_the_continuous_environment() {
        let env = GridEnv::new(GridConfig::default()).unwrap();
        assert!(build_feature_map(FeatureKind::Poly2, &env, 9, Bandwidth::Median, 0, &OfflineDataset::default()).is_err());
        let lg = LinearGaussianEnv::default();
        assert!(build_feature_map(FeatureKind::TabularOnehot, &lg, 9, Bandwidth::Median, 0, &OfflineDataset::default()).is_err());
    }

    #[test]
    fn rff_same_seed_same_parameters() {
        let (a, b) = (vector_rff(16, 1.0, 5), vector_rff(16, 1.0, 5));
        assert_eq!(a, b);
        assert_ne!(a.omega, vector_rff(16, 1.0, 6).omega);
        assert!(RffMap::new(InputEncoding::Vector { dim: 2, n_actions: 3 }, 0, 1.0, 0).is_err());
        assert!(RffMap::new(InputEncoding::Vector { dim: 2, n_actions: 3 }, 4, 0.0, 0).is_err());
    }

    #[test]
    fn rff_approximates_the_gaussian_kernel() {
        let m = vector_rff(512, 1.5, 7);
        let mut r = rng::seeded(8);
        for _ in 0..100 {
            let x: Vec<f64> = (0..5).map(|_| r.gen_range(-1.5..1.5)).collect();
            let y: Vec<f64> = (0..5).map(|_| r.gen_range(-1.5..1.5)).collect();
            let (mut gx, mut gy) = (vec![0.0; 512], vec![0.0; 512]);
            m.apply_input(&x, &mut gx);
            m.apply_input(&y, &mut gy);
            let dot: f64 = gx.iter().zip(&gy).map(|(a, b)| a * b).sum();
            assert!((dot - m.kernel(&x, &y)).abs() <= 0.15);
        }
    }

    #[test]
    fn sidecar_round_trip() {
        for m in [
            FeatureMap::Rff(vector_rff(8, 0.7, 3)),
            FeatureMap::Poly2,
            FeatureMap::TabularOnehot { n_states: 9, n_actions: 5 },
        ] {
            let mut buf = Vec::new();
            m.write_csv(&mut buf).unwrap();
            let back = FeatureMap::read_csv(buf.as_slice()).unwrap();
            let s = match m {
                FeatureMap::TabularOnehot { .. } => State::Discrete(2),
                _ => State::Continuous(vec![0.3, -1.2]),
            };
            assert_eq!(back.apply(&s, 1).unwrap(), m.apply(&s, 1).unwrap());
        }
    }

    #[test]
    fn median_heuristic_of_two_points() {
        let enc = InputEncoding::Vector { dim: 2, n_actions: 3 };
        let t = |x: f64| crate::mdp::Transition {
            traj_id: 0,
            t: 0,
            state: State::Continuous(vec![x, 0.0]),
            action: 0,
            reward: Some(0.0),
            next_state: State::Continuous(vec![0.0, 0.0]),
        };
        let data = OfflineDataset::new(vec![t(0.0), t(3.0)], vec![], 0).unwrap();
        assert_eq!(median_heuristic(&enc, &data, 11, 0).unwrap(), 3.0);
        let one = OfflineDataset::new(vec![t(0.0)], vec![], 0).unwrap();
        assert!(median_heuristic(&enc, &one, 11, 0).is_err());
    }

    proptest! {
        #[test]
        fn rff_entries_bounded_and_deterministic(
            seed in 0u64..1000,
            d in 1usize..64,
            s1 in -5.0f64..5.0,
            s2 in -5.0f64..5.0,
            a in 0usize..3,
        ) {
            let m = FeatureMap::Rff(vector_rff(d, 1.0, seed));
            let s = State::Continuous(vec![s1, s2]);
            let g = m.apply(&s, a).unwrap();
            prop_assert_eq!(g.len(), d);
            let bound = (2.0 / d as f64).sqrt();
            prop_assert!(g.iter().all(|v| v.abs() <= bound + 1e-15));
            prop_assert!(g.iter().map(|v| v * v).sum::<f64>() <= 2.0 + 1e-12);
            prop_assert_eq!(g, m.apply(&s, a).unwrap());
        }

        #[test]
        fn poly2_is_pure(s1 in -5.0f64..5.0, s2 in -5.0f64..5.0, a in 0usize..3) {
            let s = State::Continuous(vec![s1, s2]);
            let g = FeatureMap::Poly2.apply(&s, a).unwrap();
            prop_assert_eq!(g.len(), POLY2_DIM);
            prop_assert_eq!(g, FeatureMap::Poly2.apply(&s, a).unwrap());
        }
    }
}
