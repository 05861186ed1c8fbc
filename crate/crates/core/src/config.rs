//! Experiment configuration: one TOML file with a table per stage.
//!
//! Unknown keys are rejected everywhere. Relative paths are resolved against
//! the directory containing the config file and must exist when it is loaded.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::estimator::{Method, StdConvention, DEFAULT_EPSILON};
use crate::harness::{TimeoutPolicy, DEFAULT_MEMORY_MB, DEFAULT_MULTIPLIER, DEFAULT_T_MAX, DEFAULT_T_MIN};
use crate::probe::{ProbeCondition, StudySettings};
use crate::reward::{RewardKind, RewardSpec, DEFAULT_DIFFICULTY_EPSILON, MODEL_TIERS};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub corpus: Option<CorpusSource>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub reweight: Option<ReweightSection>,
    #[serde(default)]
    pub probe: Option<ProbeSection>,
    #[serde(default)]
    pub report: Option<ReportSection>,
    #[serde(default)]
    pub exec: Option<ExecSection>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Conflict {
        tasks: usize,
        tests: usize,
        harmful_pass_fraction: f64,
        #[serde(default)]
        test_correlation: f64,
    },
    Easy {
        tasks: usize,
        tests: usize,
        #[serde(default)]
        test_correlation: f64,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_batch_tasks")]
    pub batch_tasks: usize,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub reward: RewardSpec,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub std: StdConvention,
    #[serde(default)]
    pub snapshot_every: Option<usize>,
}

fn default_batch_tasks() -> usize {
    64
}
fn default_group_size() -> usize {
    16
}
fn default_steps() -> usize {
    768
}
fn default_learning_rate() -> f64 {
    0.1
}
fn default_method() -> Method {
    Method::Grpo
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_tasks: self.batch_tasks,
            group_size: self.group_size,
            steps: self.steps,
            learning_rate: self.learning_rate,
            reward: self.reward.clone(),
            method: self.method,
            seed,
            epsilon: self.epsilon,
            std: self.std,
            snapshot_every: self.snapshot_every,
        }
    }
}

/// Difficulty labeling for the reweighted reward: three frozen tiers trained
/// with the pass-rate reward for decreasing step budgets.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReweightSection {
    pub tier_steps: Vec<usize>,
    #[serde(default = "default_difficulty_epsilon")]
    pub epsilon: f64,
}

fn default_difficulty_epsilon() -> f64 {
    DEFAULT_DIFFICULTY_EPSILON
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    #[serde(default = "default_etas")]
    pub etas: Vec<f64>,
    #[serde(default = "default_conditions")]
    pub conditions: Vec<ProbeCondition>,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_true")]
    pub length_normalize: bool,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: usize,
    /// Policy snapshot to probe; the uniform policy when absent.
    #[serde(default)]
    pub policy: Option<PathBuf>,
}

fn default_etas() -> Vec<f64> {
    vec![1e-2, 1e-3, 1e-4]
}
fn default_conditions() -> Vec<ProbeCondition> {
    ProbeCondition::ALL.to_vec()
}
fn default_true() -> bool {
    true
}
fn default_max_attempts() -> usize {
    64
}

impl ProbeSection {
    pub fn settings(&self, seed: u64) -> StudySettings {
        StudySettings {
            group_size: self.group_size,
            etas: self.etas.clone(),
            conditions: self.conditions.clone(),
            length_normalize: self.length_normalize,
            method: self.method,
            epsilon: self.epsilon,
            std: StdConvention::Population,
            seed,
            max_attempts: self.max_attempts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Training output directories, each holding a final policy snapshot.
    pub runs: Vec<PathBuf>,
    #[serde(default = "default_group_size")]
    pub eval_samples: usize,
    #[serde(default = "default_ks")]
    pub ks: Vec<u64>,
}

fn default_ks() -> Vec<u64> {
    vec![1, 4, 8, 16]
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecSection {
    pub problem: PathBuf,
    /// Command prefix used to launch each program, e.g. `["python3"]`.
    #[serde(default)]
    pub interpreter: Vec<String>,
    #[serde(default = "default_multiplier")]
    pub multiplier: f64,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    /// Overrides timing the canonical solution.
    #[serde(default)]
    pub canonical_runtime: Option<f64>,
    /// Address-space ceiling per test process; 0 disables it.
    #[serde(default = "default_memory_mb")]
    pub memory_mb: u64,
}

fn default_multiplier() -> f64 {
    DEFAULT_MULTIPLIER
}
fn default_t_min() -> f64 {
    DEFAULT_T_MIN
}
fn default_t_max() -> f64 {
    DEFAULT_T_MAX
}
fn default_memory_mb() -> u64 {
    DEFAULT_MEMORY_MB
}

impl ExecSection {
    pub fn timeout_policy(&self) -> TimeoutPolicy {
        TimeoutPolicy {
            multiplier: self.multiplier,
            t_min: self.t_min,
            t_max: self.t_max,
            canonical_runtime: self.canonical_runtime,
        }
    }

    pub fn memory_limit(&self) -> Option<u64> {
        (self.memory_mb > 0).then_some(self.memory_mb)
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    /// Reads, resolves relative paths against the file's directory, and validates.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(o) = &mut self.out {
            fix(o);
        }
        if let Some(CorpusSource::File { path }) = &mut self.corpus {
            fix(path);
        }
        if let Some(p) = self.probe.as_mut().and_then(|p| p.policy.as_mut()) {
            fix(p);
        }
        if let Some(r) = &mut self.report {
            r.runs.iter_mut().for_each(fix);
        }
        if let Some(e) = &mut self.exec {
            fix(&mut e.problem);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{key}: {why}")));
        let must_exist = |key: &str, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::Config(format!("{key}: {} does not exist", p.display())))
            }
        };
        if self.workers == Some(0) {
            return bad("workers", "must be positive");
        }
        match &self.corpus {
            Some(CorpusSource::Conflict { tasks, tests, harmful_pass_fraction, test_correlation }) => {
                if *tasks == 0 || *tests == 0 {
                    return bad("corpus", "tasks and tests must be positive");
                }
                if !(0.0..1.0).contains(harmful_pass_fraction) {
                    return bad("corpus.harmful_pass_fraction", "must lie in [0, 1)");
                }
                if !(0.0..=1.0).contains(test_correlation) {
                    return bad("corpus.test_correlation", "must lie in [0, 1]");
                }
            }
            Some(CorpusSource::Easy { tasks, tests, test_correlation }) => {
                if *tasks == 0 || *tests == 0 {
                    return bad("corpus", "tasks and tests must be positive");
                }
                if !(0.0..=1.0).contains(test_correlation) {
                    return bad("corpus.test_correlation", "must lie in [0, 1]");
                }
            }
            Some(CorpusSource::File { path }) => must_exist("corpus.path", path)?,
            None => {}
        }
        if let Some(t) = &self.train {
            t.to_train_config(self.seed).validate().map_err(|e| Error::Config(format!("train: {e}")))?;
            if t.reward.kind == RewardKind::Reweighted && self.reweight.is_none() {
                return bad("reweight", "the reweighted reward needs a [reweight] table");
            }
        }
        if let Some(r) = &self.reweight {
            if r.tier_steps.len() != MODEL_TIERS {
                return bad("reweight.tier_steps", "needs exactly three step budgets");
            }
            if !(r.epsilon > 0.0 && r.epsilon < 0.5) {
                return bad("reweight.epsilon", "must lie in (0, 0.5)");
            }
        }
        if let Some(p) = &self.probe {
            if p.etas.is_empty() || p.etas.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
                return bad("probe.etas", "needs one or more positive step sizes");
            }
            if p.conditions.is_empty() {
                return bad("probe.conditions", "needs at least one condition");
            }
            if p.group_size < 2 {
                return bad("probe.group_size", "must be >= 2");
            }
            if p.max_attempts == 0 {
                return bad("probe.max_attempts", "must be positive");
            }
            if !(p.epsilon > 0.0) {
                return bad("probe.epsilon", "must be positive");
            }
            if let Some(path) = &p.policy {
                must_exist("probe.policy", path)?;
            }
        }
        if let Some(r) = &self.report {
            if r.runs.is_empty() {
                return bad("report.runs", "needs at least one run directory");
            }
            for run in &r.runs {
                must_exist("report.runs", run)?;
            }
            if r.eval_samples == 0 {
                return bad("report.eval_samples", "must be positive");
            }
            if r.ks.is_empty() || r.ks.iter().any(|k| *k == 0 || *k > r.eval_samples as u64) {
                return bad("report.ks", "each k must lie in 1..=eval_samples");
            }
        }
        if let Some(e) = &self.exec {
            must_exist("exec.problem", &e.problem)?;
            e.timeout_policy().validate().map_err(|err| Error::Config(format!("exec: {err}")))?;
        }
        Ok(())
    }
}
