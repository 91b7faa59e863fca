//! Experiment configurations, sweeps and their on-disk artifacts
//! (`results.csv`, `summary.csv`, `manifest.json`).

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{Method, MethodSpec, PipelineConfig, TawMode};
use crate::environments::{GridConfig, LinearGaussianConfig};
use crate::error::{Result, SplError};
use crate::evaluation::{
    coverage_study, read_results_csv, run_replications, tightness_study, write_results_csv,
    BehaviorSpec, CoverageMode, EnvConfig, Estimate, EvalConfig, ReplicationResult, Scenario,
    StudyConfig, ERROR_METRIC,
};

pub const DEFAULT_SEED: u64 = 2024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    Fig1bRatio,
    Fig1bEpsilon,
    Fig2a,
    #[default]
    Fig2b,
    Fig5,
    Coverage,
    Tightness,
    Custom,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 8] = [
        ExperimentId::Fig1bRatio,
        ExperimentId::Fig1bEpsilon,
        ExperimentId::Fig2a,
        ExperimentId::Fig2b,
        ExperimentId::Fig5,
        ExperimentId::Coverage,
        ExperimentId::Tightness,
        ExperimentId::Custom,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentId::Fig1bRatio => "fig1b-ratio",
            ExperimentId::Fig1bEpsilon => "fig1b-epsilon",
            ExperimentId::Fig2a => "fig2a",
            ExperimentId::Fig2b => "fig2b",
            ExperimentId::Fig5 => "fig5",
            ExperimentId::Coverage => "coverage",
            ExperimentId::Tightness => "tightness",
            ExperimentId::Custom => "custom",
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            ExperimentId::Fig1bRatio => "grid: return of PL, SPL and Oracle as n_U/n_L varies (n_L = 120)",
            ExperimentId::Fig1bEpsilon => "grid: return of PL, SPL and Oracle as the labeled ε varies (n_U = 150)",
            ExperimentId::Fig2a => "linear-gaussian: regret as n_L varies at n_U/n_L = 10",
            ExperimentId::Fig2b => "linear-gaussian: regret as n_U/n_L varies at n_L = 32",
            ExperimentId::Fig5 => "grid: SPL vs PPL as the unlabeled ε varies",
            ExperimentId::Coverage => "linear-gaussian: per-point coverage of the pessimistic reward",
            ExperimentId::Tightness => "linear-gaussian: Δ_SUG against Δ_INI on a fixed point grid",
            ExperimentId::Custom => "single scenario assembled from the config fields",
        }
    }

    fn is_study(&self) -> bool {
        matches!(self, ExperimentId::Coverage | ExperimentId::Tightness)
    }
}

/// Which scenario field a sweep value sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    /// `n_U / n_L`.
    Ratio,
    NLabeled,
    LabeledEpsilon,
    UnlabeledEpsilon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

/// JSON experiment description. Every field except `experiment` is optional;
/// [`ExperimentConfig::resolve`] fills the experiment's defaults, and the
/// resolved form is what `manifest.json` records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub env: Option<EnvConfig>,
    pub methods: Option<Vec<Method>>,
    pub sweep: Option<Sweep>,
    pub n_labeled: Option<usize>,
    /// `n_U / n_L` when the sweep does not set it.
    pub ratio: Option<f64>,
    /// Trajectory length of the offline data.
    pub horizon: Option<usize>,
    pub labeled_behavior: Option<BehaviorSpec>,
    pub unlabeled_behavior: Option<BehaviorSpec>,
    pub coverage: Option<CoverageMode>,
    pub removal_fraction: Option<f64>,
    /// Uncertainty-quantile filter of SPL; 1 keeps every unlabeled tuple.
    pub spl_quantile: Option<f64>,
    pub pds_beta: Option<f64>,
    pub taw: Option<TawMode>,
    pub pipeline: Option<PipelineConfig>,
    pub eval: Option<EvalConfig>,
    pub n_reps: Option<usize>,
    /// Evaluation points of the coverage and tightness studies.
    pub n_points: Option<usize>,
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every available core.
    pub parallelism: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

fn grid_env() -> EnvConfig {
    EnvConfig::Grid(GridConfig::default())
}

fn lg_env() -> EnvConfig {
    EnvConfig::LinearGaussian(LinearGaussianConfig::default())
}

const FIG2_METHODS: [Method; 6] = [
    Method::NoShare,
    Method::PNoShare,
    Method::Pl,
    Method::Uds,
    Method::Pds,
    Method::Spl,
];

const EPSILONS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

impl ExperimentConfig {
    pub fn new(experiment: ExperimentId) -> Self {
        Self {
            experiment,
            ..Self::default()
        }
    }

    /// Fills every unset field with the experiment's default. `seed_fallback`
    /// is used when no seed is configured (before [`DEFAULT_SEED`]).
    pub fn resolve(mut self, seed_fallback: Option<u64>) -> Result<Self> {
        use ExperimentId::*;
        let id = self.experiment;
        let env = self.env.get_or_insert_with(|| match id {
            Fig1bRatio | Fig1bEpsilon | Fig5 => grid_env(),
            _ => lg_env(),
        });
        let grid = matches!(env, EnvConfig::Grid(_));
        let built = env.build()?;

        if !id.is_study() {
            self.methods.get_or_insert_with(|| match id {
                Fig1bRatio | Fig1bEpsilon => vec![Method::Pl, Method::Spl, Method::Oracle],
                Fig5 => vec![Method::Spl, Method::Ppl],
                _ => FIG2_METHODS.to_vec(),
            });
            let (param, values) = match id {
                Fig1bRatio => (SweepParam::Ratio, vec![0.25, 0.5, 1.0, 1.25]),
                Fig1bEpsilon => (SweepParam::LabeledEpsilon, EPSILONS.to_vec()),
                Fig5 => (SweepParam::UnlabeledEpsilon, EPSILONS.to_vec()),
                Fig2a => (SweepParam::NLabeled, vec![32.0, 64.0, 128.0, 256.0]),
                Fig2b => (SweepParam::Ratio, vec![1.0, 2.0, 5.0, 10.0]),
                _ => (SweepParam::Ratio, vec![10.0]),
            };
            self.sweep.get_or_insert(Sweep { param, values });
        }
        self.n_labeled.get_or_insert(if grid { 120 } else { 32 });
        self.ratio.get_or_insert(match id {
            Fig1bEpsilon | Fig5 => 1.25,
            _ => 10.0,
        });
        self.horizon.get_or_insert(if grid { 1 } else { 30 });
        self.labeled_behavior.get_or_insert(if grid {
            BehaviorSpec::EpsilonOptimal { epsilon: 0.1 }
        } else {
            BehaviorSpec::Uniform
        });
        self.unlabeled_behavior.get_or_insert(BehaviorSpec::Uniform);
        let coverage = *self.coverage.get_or_insert(match id {
            Fig2a | Fig2b => CoverageMode::Partial,
            _ => CoverageMode::Full,
        });
        self.removal_fraction.get_or_insert(match coverage {
            CoverageMode::Full => 0.0,
            CoverageMode::Partial => 0.8,
        });
        self.spl_quantile.get_or_insert(match (grid, coverage) {
            (true, _) => 1.0,
            (false, CoverageMode::Full) => 0.9,
            (false, CoverageMode::Partial) => 0.3,
        });
        self.pds_beta.get_or_insert(MethodSpec::new(Method::Pds).pds_beta);
        self.taw.get_or_insert(TawMode::default());
        self.pipeline.get_or_insert_with(|| PipelineConfig::for_env(&built));
        self.eval.get_or_insert_with(|| EvalConfig::for_env(&built));
        self.n_reps.get_or_insert(match id {
            Fig1bRatio | Fig1bEpsilon | Fig5 => 20,
            Coverage => 500,
            _ => 100,
        });
        self.n_points.get_or_insert(match id {
            Coverage => 20,
            _ => 50,
        });
        self.seed = self.seed.or(seed_fallback).or(Some(DEFAULT_SEED));
        self.parallelism.get_or_insert(0);
        self.out_dir
            .get_or_insert_with(|| PathBuf::from("results").join(id.name()));
        self.validate()?;
        Ok(self)
    }

    /// Reads a config file, resolves it and applies dotted `key=value`
    /// overrides to the resolved form.
    pub fn load(path: &Path, overrides: &[String], seed_fallback: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| SplError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| SplError::Config(format!("{}: {e}", path.display())))?;
        cfg.with_overrides(overrides, seed_fallback)
    }

    pub fn with_overrides(self, overrides: &[String], seed_fallback: Option<u64>) -> Result<Self> {
        let resolved = self.resolve(seed_fallback)?;
        if overrides.is_empty() {
            return Ok(resolved);
        }
        let mut value = serde_json::to_value(&resolved)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| SplError::Config(format!("override '{o}' is not key=value")))?;
            apply_override(&mut value, key.trim(), raw.trim())?;
        }
        let cfg: Self = serde_json::from_value(value)
            .map_err(|e| SplError::Config(format!("after overrides: {e}")))?;
        cfg.resolve(seed_fallback)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SplError::Config(m));
        let grid = matches!(self.env, Some(EnvConfig::Grid(_)));
        if self.n_reps == Some(0) {
            return bad("n_reps must be at least 1".into());
        }
        if self.n_labeled == Some(0) {
            return bad("n_labeled must be at least 1".into());
        }
        if self.horizon == Some(0) {
            return bad("horizon must be at least 1".into());
        }
        if self.ratio.is_some_and(|r| !(r >= 0.0 && r.is_finite())) {
            return bad("ratio must be a finite non-negative number".into());
        }
        if let Some(q) = self.spl_quantile {
            if !(q > 0.0 && q <= 1.0) {
                return bad(format!("spl_quantile must lie in (0, 1], got {q}"));
            }
        }
        if let Some(f) = self.removal_fraction {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("removal_fraction must lie in [0, 1], got {f}"));
            }
        }
        if grid && self.coverage == Some(CoverageMode::Partial) {
            return bad("partial coverage is defined for the linear-gaussian environment only".into());
        }
        if self.experiment.is_study() {
            if grid {
                return bad(format!("{} needs the linear-gaussian environment", self.experiment.name()));
            }
            if self.n_points == Some(0) {
                return bad("n_points must be at least 1".into());
            }
            return Ok(());
        }
        match &self.methods {
            Some(m) if m.is_empty() => return bad("method list is empty".into()),
            Some(m) if !grid => {
                if let Some(t) = m.iter().find(|m| m.needs_tabular()) {
                    return bad(format!("method {t} needs a finite state space"));
                }
            }
            _ => {}
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return bad("sweep values are empty".into());
            }
            for &v in &sweep.values {
                let ok = match sweep.param {
                    SweepParam::Ratio => v >= 0.0 && v.is_finite(),
                    SweepParam::NLabeled => v >= 1.0 && v.fract() == 0.0,
                    SweepParam::LabeledEpsilon | SweepParam::UnlabeledEpsilon => (0.0..=1.0).contains(&v),
                };
                if !ok {
                    return bad(format!("sweep value {v} is out of range for {:?}", sweep.param));
                }
            }
        }
        Ok(())
    }

    fn field<T: Clone>(v: &Option<T>, name: &str) -> Result<T> {
        v.clone()
            .ok_or_else(|| SplError::Config(format!("{name} is unresolved")))
    }

    pub fn method_specs(&self) -> Result<Vec<MethodSpec>> {
        let q = Self::field(&self.spl_quantile, "spl_quantile")?;
        let beta = Self::field(&self.pds_beta, "pds_beta")?;
        let taw = Self::field(&self.taw, "taw")?;
        Ok(Self::field(&self.methods, "methods")?
            .into_iter()
            .map(|m| MethodSpec {
                quantile: (m == Method::Spl && q < 1.0).then_some(q),
                pds_beta: beta,
                taw,
                ..MethodSpec::new(m)
            })
            .collect())
    }

    /// One scenario per sweep value.
    pub fn scenarios(&self) -> Result<Vec<Scenario>> {
        let sweep = Self::field(&self.sweep, "sweep")?;
        let base_l = Self::field(&self.labeled_behavior, "labeled_behavior")?;
        let base_u = Self::field(&self.unlabeled_behavior, "unlabeled_behavior")?;
        let methods = self.method_specs()?;
        sweep
            .values
            .iter()
            .map(|&v| {
                let mut n_l = Self::field(&self.n_labeled, "n_labeled")?;
                let mut ratio = Self::field(&self.ratio, "ratio")?;
                let (mut l, mut u) = (base_l, base_u);
                match sweep.param {
                    SweepParam::Ratio => ratio = v,
                    SweepParam::NLabeled => n_l = v as usize,
                    SweepParam::LabeledEpsilon => l = BehaviorSpec::EpsilonOptimal { epsilon: v },
                    SweepParam::UnlabeledEpsilon => u = BehaviorSpec::EpsilonOptimal { epsilon: v },
                }
                Ok(Scenario {
                    env: Self::field(&self.env, "env")?,
                    n_labeled: n_l,
                    n_unlabeled: (ratio * n_l as f64).round() as usize,
                    horizon: Self::field(&self.horizon, "horizon")?,
                    labeled_behavior: l,
                    unlabeled_behavior: u,
                    coverage: Self::field(&self.coverage, "coverage")?,
                    removal_fraction: Self::field(&self.removal_fraction, "removal_fraction")?,
                    methods: methods.clone(),
                    pipeline: Self::field(&self.pipeline, "pipeline")?,
                    eval: Self::field(&self.eval, "eval")?,
                    base_seed: Self::field(&self.seed, "seed")?,
                })
            })
            .collect()
    }

    pub fn study(&self) -> Result<StudyConfig> {
        let n_l = Self::field(&self.n_labeled, "n_labeled")?;
        let ratio = Self::field(&self.ratio, "ratio")?;
        Ok(StudyConfig {
            env: Self::field(&self.env, "env")?,
            n_labeled: n_l,
            n_unlabeled: (ratio * n_l as f64).round() as usize,
            horizon: Self::field(&self.horizon, "horizon")?,
            behavior: Self::field(&self.labeled_behavior, "labeled_behavior")?,
            n_reps: Self::field(&self.n_reps, "n_reps")?,
            n_points: Self::field(&self.n_points, "n_points")?,
            pipeline: Self::field(&self.pipeline, "pipeline")?,
            seed: Self::field(&self.seed, "seed")?,
        })
    }

    fn threads(&self) -> usize {
        match self.parallelism.unwrap_or(0) {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            p => p,
        }
    }
}

/// Sets `key` (dot-separated path) inside `root` to `raw`, parsed as JSON when
/// possible and taken as a string otherwise. Missing objects are created.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(SplError::Config(format!("malformed override key '{key}'")));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| SplError::Config(format!("'{key}': '{part}' is not inside an object")))?;
        if parts.peek().is_none() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("key has at least one segment")
}

/// Runs a resolved experiment. Rows are ordered by sweep cell, then
/// replication, then method.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ReplicationResult>> {
    let threads = cfg.threads();
    match cfg.experiment {
        ExperimentId::Coverage | ExperimentId::Tightness => {
            let study = cfg.study()?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| SplError::InvalidArgument(e.to_string()))?;
            pool.install(|| study_rows(cfg.experiment, &study))
        }
        _ => {
            let n_reps = ExperimentConfig::field(&cfg.n_reps, "n_reps")?;
            let mut rows = Vec::new();
            for sc in cfg.scenarios()? {
                log::info!(
                    "{}: n_L = {}, n_U = {}, ε = {:?}",
                    cfg.experiment.name(),
                    sc.n_labeled,
                    sc.n_unlabeled,
                    sc.epsilon()
                );
                rows.extend(run_replications(&sc, n_reps, threads)?);
            }
            Ok(rows)
        }
    }
}

/// Study outputs in the results schema; `rep` holds the evaluation-point index.
fn study_rows(id: ExperimentId, study: &StudyConfig) -> Result<Vec<ReplicationResult>> {
    let row = |method: &str, j: usize, metric: &str, value: f64| ReplicationResult {
        method: method.to_string(),
        rep: j,
        metric: metric.to_string(),
        value,
        n_labeled: study.n_labeled,
        n_unlabeled: study.n_unlabeled,
        epsilon: study.behavior.epsilon(),
        coverage_mode: CoverageMode::Full.name().to_string(),
        seed: study.seed,
    };
    let mut rows = Vec::new();
    if id == ExperimentId::Coverage {
        let rep = coverage_study(study)?;
        for (j, c) in rep.coverage.iter().enumerate() {
            rows.push(row("SUQ", j, "coverage", *c));
        }
        if rep.failed_refits > 0 {
            rows.push(row("SUQ", 0, ERROR_METRIC, rep.failed_refits as f64));
        }
    } else {
        let rep = tightness_study(study)?;
        for j in 0..rep.ratio.len() {
            rows.push(row("INI", j, "delta", rep.mean_delta_ini[j]));
            rows.push(row("SUQ", j, "delta", rep.mean_delta_sug[j]));
            rows.push(row("SUQ", j, "ratio", rep.ratio[j]));
        }
        if rep.failed_reps > 0 {
            rows.push(row("SUQ", 0, ERROR_METRIC, rep.failed_reps as f64));
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// summaries and artifacts

pub const SUMMARY_HEADER: [&str; 7] = ["experiment", "cell", "method", "metric", "mean", "stderr", "count"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub cell: String,
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    /// Rows in the group; 1 marks a standard error that is 0 by convention.
    pub count: usize,
}

/// Identifies the sweep cell a row belongs to.
pub fn cell_key(r: &ReplicationResult) -> String {
    format!(
        "n_labeled={};n_unlabeled={};epsilon={};coverage={}",
        r.n_labeled,
        r.n_unlabeled,
        r.epsilon.map(|e| format!("{e:?}")).unwrap_or_default(),
        r.coverage_mode
    )
}

/// Mean and standard error per (cell, method, metric), in order of first
/// appearance. Non-finite values are left out of the moments but counted.
pub fn emit_summary(experiment: &str, rows: &[ReplicationResult]) -> Vec<SummaryRow> {
    let mut index: HashMap<(String, String, String), usize> = HashMap::new();
    let mut groups: Vec<((String, String, String), Vec<f64>, usize)> = Vec::new();
    for r in rows {
        let key = (cell_key(r), r.method.clone(), r.metric.clone());
        let i = *index.entry(key.clone()).or_insert_with(|| {
            groups.push((key, Vec::new(), 0));
            groups.len() - 1
        });
        groups[i].2 += 1;
        if r.value.is_finite() {
            groups[i].1.push(r.value);
        }
    }
    groups
        .into_iter()
        .map(|((cell, method, metric), values, count)| {
            let (mean, stderr) = if values.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let e = Estimate::from_samples(&values);
                (e.mean, e.stderr)
            };
            SummaryRow {
                experiment: experiment.to_string(),
                cell,
                method,
                metric,
                mean,
                stderr,
                count,
            }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.cell.clone(),
            r.method.clone(),
            r.metric.clone(),
            format!("{:?}", r.mean),
            format!("{:?}", r.stderr),
            r.count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Summarizes a `results.csv` stream.
pub fn summarize<R: Read, W: Write>(experiment: &str, input: R, output: W) -> Result<()> {
    let rows = read_results_csv(input)?;
    write_summary_csv(&emit_summary(experiment, &rows), output)
}

/// Everything needed to rerun an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: ExperimentConfig,
    /// Replication seeds `seed + rep` of each cell.
    pub replication_seeds: Vec<u64>,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        let seed = config.seed.unwrap_or(DEFAULT_SEED);
        let n = if config.experiment.is_study() {
            0
        } else {
            config.n_reps.unwrap_or(0)
        };
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            replication_seeds: (0..n as u64).map(|i| seed.wrapping_add(i)).collect(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| SplError::Config(format!("{}: {e}", path.display())))
    }
}

/// Writes `results.csv`, `summary.csv` and `manifest.json` into `dir`.
pub fn write_artifacts(cfg: &ExperimentConfig, rows: &[ReplicationResult], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_results_csv(rows, fs::File::create(dir.join("results.csv"))?)?;
    let summary = emit_summary(cfg.experiment.name(), rows);
    write_summary_csv(&summary, fs::File::create(dir.join("summary.csv"))?)?;
    let manifest = serde_json::to_string_pretty(&Manifest::new(cfg))?;
    fs::write(dir.join("manifest.json"), manifest + "\n")?;
    Ok(())
}
