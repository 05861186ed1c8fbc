//! Gradient-direction probes against a full-pass reference.
//!
//! A probe applies one small update to a scratch copy of the policy and
//! measures the change in log-probability of the task's reference `y_full`.
//! The group probe uses the whole group's update; the sample probe isolates
//! one member's term, keeping advantages computed over the full group.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{pass_rate, Corpus, Mode, Task};
use crate::error::{Error, Result};
use crate::estimator::{advantages, Method, StdConvention, DEFAULT_EPSILON};
use crate::policy::{Gradient, Policy};
use crate::reward::binary_reward;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProbeCondition {
    PassRateWithoutFull,
    PassRateWithFull,
    BinaryWithoutFull,
    BinaryWithFull,
}

impl ProbeCondition {
    pub const ALL: [ProbeCondition; 4] = [
        ProbeCondition::PassRateWithoutFull,
        ProbeCondition::PassRateWithFull,
        ProbeCondition::BinaryWithoutFull,
        ProbeCondition::BinaryWithFull,
    ];

    /// Whether the rewritten reference is appended with reward 1.
    pub fn with_full(self) -> bool {
        matches!(self, ProbeCondition::PassRateWithFull | ProbeCondition::BinaryWithFull)
    }

    pub fn binary(self) -> bool {
        matches!(self, ProbeCondition::BinaryWithoutFull | ProbeCondition::BinaryWithFull)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeCondition::PassRateWithoutFull => "PASS_RATE_WITHOUT_FULL",
            ProbeCondition::PassRateWithFull => "PASS_RATE_WITH_FULL",
            ProbeCondition::BinaryWithoutFull => "BINARY_WITHOUT_FULL",
            ProbeCondition::BinaryWithFull => "BINARY_WITH_FULL",
        }
    }
}

impl fmt::Display for ProbeCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub eta: f64,
    pub condition: ProbeCondition,
    pub length_normalize: bool,
    pub method: Method,
    pub epsilon: f64,
    pub std: StdConvention,
}

impl ProbeConfig {
    pub fn new(eta: f64, condition: ProbeCondition) -> Self {
        ProbeConfig {
            eta,
            condition,
            length_normalize: true,
            method: Method::Grpo,
            epsilon: DEFAULT_EPSILON,
            std: StdConvention::Population,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("probe step size must be positive"));
        }
        Ok(())
    }
}

/// The group a probe update is built from, after the condition's augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeGroup {
    pub sequences: Vec<Vec<u32>>,
    pub modes: Vec<Mode>,
    pub pass_rates: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Scores the sampled group under the condition's reward and, for with-full
/// conditions, appends the rewritten reference with reward 1.
pub fn build_probe_group(task: &Task, group: &[Vec<u32>], cfg: &ProbeConfig) -> Result<ProbeGroup> {
    cfg.validate()?;
    if group.is_empty() {
        return Err(Error::invalid("probe group is empty"));
    }
    let y_full = task.y_full();
    if !y_full.pass_bits.is_full_pass() {
        return Err(Error::invalid(format!("task {}: y_full is not full-pass", task.id)));
    }
    let mut sequences = group.to_vec();
    for s in &sequences {
        task.check_tokens(s)?;
    }
    if cfg.condition.with_full() {
        let rewrite = task
            .y_full_rewrite()
            .ok_or_else(|| Error::invalid(format!("task {} has no rewritten reference", task.id)))?;
        sequences.push(rewrite.tokens.clone());
    }
    let mut modes = Vec::with_capacity(sequences.len());
    let mut pass_rates = Vec::with_capacity(sequences.len());
    let mut rewards = Vec::with_capacity(sequences.len());
    for s in &sequences {
        let (pv, mode) = task.outcome(s);
        modes.push(mode);
        pass_rates.push(pass_rate(&pv)?);
        rewards.push(if cfg.condition.binary() { binary_reward(&pv)? } else { pass_rate(&pv)? });
    }
    if cfg.condition.with_full() {
        *rewards.last_mut().expect("appended") = 1.0;
    }
    let advantages = advantages(cfg.method, &rewards, cfg.epsilon, cfg.std)?.advantages;
    Ok(ProbeGroup { sequences, modes, pass_rates, rewards, advantages })
}

fn check_reference_not_in_group(task: &Task, group: &[Vec<u32>]) -> Result<()> {
    let full = &task.y_full().tokens;
    if group.iter().any(|s| s == full) {
        return Err(Error::invalid(format!("task {}: y_full appears verbatim in the probe group", task.id)));
    }
    Ok(())
}

/// `log π_{θ+η·dir}(y_full) − log π_θ(y_full)`, optionally per token.
fn reference_delta(policy: &Policy, task: &Task, dir: &Gradient, cfg: &ProbeConfig) -> Result<f64> {
    let y_full = &task.y_full().tokens;
    let before = policy.log_prob(task, y_full)?;
    let after = policy.apply_update(dir, cfg.eta)?.log_prob(task, y_full)?;
    let delta = after - before;
    Ok(if cfg.length_normalize { delta / y_full.len() as f64 } else { delta })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub task_id: String,
    pub condition: ProbeCondition,
    pub method: Method,
    pub eta: f64,
    /// Δ_grp, length-normalized when `normalized`.
    pub delta_grp: f64,
    /// Δ_grp without length normalization.
    pub delta_grp_raw: f64,
    /// Δ_i per member of the (augmented) group, normalized like `delta_grp`.
    pub per_sample: Vec<f64>,
    pub group: ProbeGroup,
    pub normalized: bool,
}

/// Group-level probe: `θ' = θ + η Σ_i A_i ∇log π(y_i)`.
pub fn group_probe(policy: &Policy, task: &Task, group: &[Vec<u32>], cfg: &ProbeConfig) -> Result<ProbeReport> {
    check_reference_not_in_group(task, group)?;
    let pg = build_probe_group(task, group, cfg)?;
    let mut dir = Gradient::zeros(policy.layout());
    for (s, a) in pg.sequences.iter().zip(&pg.advantages) {
        policy.accumulate_grad(task, s, *a, &mut dir)?;
    }
    let raw_cfg = ProbeConfig { length_normalize: false, ..cfg.clone() };
    let delta_grp_raw = reference_delta(policy, task, &dir, &raw_cfg)?;
    let delta_grp = if cfg.length_normalize {
        delta_grp_raw / task.y_full().tokens.len() as f64
    } else {
        delta_grp_raw
    };
    let per_sample = (0..pg.sequences.len())
        .map(|i| sample_delta(policy, task, &pg, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeReport {
        task_id: task.id.clone(),
        condition: cfg.condition,
        method: cfg.method,
        eta: cfg.eta,
        delta_grp,
        delta_grp_raw,
        per_sample,
        group: pg,
        normalized: cfg.length_normalize,
    })
}

fn sample_delta(policy: &Policy, task: &Task, pg: &ProbeGroup, i: usize, cfg: &ProbeConfig) -> Result<f64> {
    let mut dir = Gradient::zeros(policy.layout());
    policy.accumulate_grad(task, &pg.sequences[i], pg.advantages[i], &mut dir)?;
    reference_delta(policy, task, &dir, cfg)
}

/// Sample-level probe: `θ'_i = θ + η A_i ∇log π(y_i)`, with `A_i` computed
/// over the whole (augmented) group. `i` may index the appended reference.
pub fn sample_probe(policy: &Policy, task: &Task, group: &[Vec<u32>], i: usize, cfg: &ProbeConfig) -> Result<f64> {
    let pg = build_probe_group(task, group, cfg)?;
    if i >= pg.sequences.len() {
        return Err(Error::invalid(format!(
            "sample index {i} out of range for a probe group of {}",
            pg.sequences.len()
        )));
    }
    sample_delta(policy, task, &pg, i, cfg)
}

// ---------------------------------------------------------------------------
// Conflict statistics
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct JudgedSample {
    pub mode: Option<Mode>,
    pub pass_rate: f64,
    pub advantage: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JudgedGroup {
    pub task_id: String,
    pub samples: Vec<JudgedSample>,
}

impl JudgedGroup {
    /// Members of a pass-rate probe group, excluding any appended reference.
    pub fn from_report(report: &ProbeReport, sampled: usize) -> JudgedGroup {
        let g = &report.group;
        JudgedGroup {
            task_id: report.task_id.clone(),
            samples: (0..sampled.min(g.sequences.len()))
                .map(|i| JudgedSample { mode: Some(g.modes[i]), pass_rate: g.pass_rates[i], advantage: g.advantages[i] })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ConflictReport {
    pub tasks_any_judged: usize,
    pub tasks_with_both: usize,
    pub reversal_count: usize,
    pub reversal_rate: f64,
    pub conflict_count: usize,
    pub conflict_rate: f64,
}

/// Reversal: best HARMFUL pass rate above best HELPFUL pass rate, among tasks
/// with both modes. Conflict: a HARMFUL sample with A>0 and a HELPFUL sample
/// with A<0 in the same group, over all judged tasks.
pub fn conflict_report(groups: &[JudgedGroup]) -> Result<ConflictReport> {
    let mut r = ConflictReport { tasks_any_judged: groups.len(), ..Default::default() };
    for g in groups {
        let mut best_help: Option<f64> = None;
        let mut best_harm: Option<f64> = None;
        let (mut harm_pos, mut help_neg) = (false, false);
        for s in &g.samples {
            let mode = s.mode.ok_or_else(|| Error::invalid(format!("task {}: sample without a mode label", g.task_id)))?;
            match mode {
                Mode::Helpful => {
                    best_help = Some(best_help.map_or(s.pass_rate, |b| b.max(s.pass_rate)));
                    help_neg |= s.advantage < 0.0;
                }
                Mode::Harmful => {
                    best_harm = Some(best_harm.map_or(s.pass_rate, |b| b.max(s.pass_rate)));
                    harm_pos |= s.advantage > 0.0;
                }
                Mode::Full | Mode::Other => {}
            }
        }
        if let (Some(help), Some(harm)) = (best_help, best_harm) {
            r.tasks_with_both += 1;
            if harm > help {
                r.reversal_count += 1;
            }
        }
        if harm_pos && help_neg {
            r.conflict_count += 1;
        }
    }
    r.reversal_rate = ratio(r.reversal_count, r.tasks_with_both);
    r.conflict_rate = ratio(r.conflict_count, r.tasks_any_judged);
    Ok(r)
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

// ---------------------------------------------------------------------------
// Corpus-level study
// ---------------------------------------------------------------------------

/// Draws groups with derived seeds until one has no full-pass member.
/// Returns the group and the attempt index, or `None` after `max_attempts`.
pub fn find_without_full_group(
    policy: &Policy,
    task: &Task,
    n: usize,
    seed: u64,
    max_attempts: usize,
) -> Result<Option<(Vec<Vec<u32>>, usize)>> {
    for attempt in 0..max_attempts {
        let s = seed::derive(seed, &["probe-group", &task.id, &attempt.to_string()]);
        let group = policy.sample(task, n, s)?;
        if group.iter().all(|y| !task.outcome(y).0.is_full_pass()) {
            return Ok(Some((group, attempt)));
        }
    }
    Ok(None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudySettings {
    pub group_size: usize,
    pub etas: Vec<f64>,
    pub conditions: Vec<ProbeCondition>,
    pub length_normalize: bool,
    pub method: Method,
    pub epsilon: f64,
    pub std: StdConvention,
    pub seed: u64,
    pub max_attempts: usize,
}

impl StudySettings {
    pub fn new(seed: u64) -> Self {
        StudySettings {
            group_size: 16,
            etas: vec![1e-2, 1e-3, 1e-4],
            conditions: ProbeCondition::ALL.to_vec(),
            length_normalize: true,
            method: Method::Grpo,
            epsilon: DEFAULT_EPSILON,
            std: StdConvention::Population,
            seed,
            max_attempts: 64,
        }
    }

    pub fn probe_config(&self, eta: f64, condition: ProbeCondition) -> ProbeConfig {
        ProbeConfig {
            eta,
            condition,
            length_normalize: self.length_normalize,
            method: self.method,
            epsilon: self.epsilon,
            std: self.std,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskProbe {
    pub task_id: String,
    pub group: Vec<Vec<u32>>,
    /// One report per (condition, eta), conditions outermost.
    pub reports: Vec<ProbeReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeStudy {
    pub tasks: Vec<TaskProbe>,
    /// Tasks with no without-full group within the attempt budget.
    pub skipped: Vec<String>,
    pub group_size: usize,
}

impl ProbeStudy {
    pub fn reports(&self, condition: ProbeCondition, eta: f64) -> impl Iterator<Item = &ProbeReport> {
        self.tasks
            .iter()
            .flat_map(move |t| t.reports.iter().filter(move |r| r.condition == condition && r.eta == eta))
    }

    pub fn mean_delta_grp(&self, condition: ProbeCondition, eta: f64) -> Option<f64> {
        let v: Vec<f64> = self.reports(condition, eta).map(|r| r.delta_grp).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Conflict statistics from the pass-rate, without-full groups.
    pub fn conflicts(&self, eta: f64) -> Result<ConflictReport> {
        let judged: Vec<JudgedGroup> = self
            .reports(ProbeCondition::PassRateWithoutFull, eta)
            .map(|r| JudgedGroup::from_report(r, self.group_size))
            .collect();
        conflict_report(&judged)
    }

    /// Share of groups with both a strictly positive and a strictly negative Δ_i.
    pub fn mixed_sign_fraction(&self, condition: ProbeCondition, eta: f64) -> f64 {
        let all: Vec<&ProbeReport> = self.reports(condition, eta).collect();
        let mixed = all
            .iter()
            .filter(|r| r.per_sample.iter().any(|d| *d > 0.0) && r.per_sample.iter().any(|d| *d < 0.0))
            .count();
        ratio(mixed, all.len())
    }
}

/// Probes every task of a corpus in the without-full regime.
pub fn run_study(policy: &Policy, corpus: &Corpus, settings: &StudySettings) -> Result<ProbeStudy> {
    policy.check_corpus(corpus)?;
    let per_task = corpus
        .tasks
        .par_iter()
        .map(|task| -> Result<Option<TaskProbe>> {
            let task_seed = seed::task_seed(settings.seed, &task.id);
            let Some((group, _)) =
                find_without_full_group(policy, task, settings.group_size, task_seed, settings.max_attempts)?
            else {
                return Ok(None);
            };
            let mut reports = Vec::new();
            for &condition in &settings.conditions {
                for &eta in &settings.etas {
                    reports.push(group_probe(policy, task, &group, &settings.probe_config(eta, condition))?);
                }
            }
            Ok(Some(TaskProbe { task_id: task.id.clone(), group, reports }))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tasks = Vec::new();
    let mut skipped = Vec::new();
    for (task, probe) in corpus.tasks.iter().zip(per_task) {
        match probe {
            Some(p) => tasks.push(p),
            None => skipped.push(task.id.clone()),
        }
    }
    Ok(ProbeStudy { tasks, skipped, group_size: settings.group_size })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::gen_conflict_corpus;

    fn setup() -> (Corpus, Policy) {
        let c = gen_conflict_corpus(4, 25, 0.84, 17).unwrap();
        let p = Policy::uniform(&c).unwrap();
        (c, p)
    }

    fn group_for(p: &Policy, t: &Task) -> Vec<Vec<u32>> {
        find_without_full_group(p, t, 16, 1, 64).unwrap().unwrap().0
    }

    #[test]
    fn binary_without_full_is_exactly_zero() {
        let (c, p) = setup();
        for t in &c.tasks {
            let g = group_for(&p, t);
            let r = group_probe(&p, t, &g, &ProbeConfig::new(1e-3, ProbeCondition::BinaryWithoutFull)).unwrap();
            assert_eq!(r.delta_grp, 0.0);
            assert!(r.per_sample.iter().all(|d| *d == 0.0));
            assert_eq!(r.per_sample.len(), 16);
        }
    }

    #[test]
    fn with_full_appends_reference() {
        let (c, p) = setup();
        let t = &c.tasks[0];
        let g = group_for(&p, t);
        let r = group_probe(&p, t, &g, &ProbeConfig::new(1e-3, ProbeCondition::BinaryWithFull)).unwrap();
        assert_eq!(r.per_sample.len(), 17);
        assert_eq!(r.group.rewards[16], 1.0);
        assert_eq!(r.group.sequences[16], t.y_full_rewrite().unwrap().tokens);
        assert!(r.delta_grp > 0.0);
    }

    #[test]
    fn equal_pass_rates_give_zero() {
        let (c, p) = setup();
        let t = &c.tasks[0];
        let harmful: Vec<Vec<u32>> =
            t.programs.iter().filter(|x| x.mode == Mode::Harmful).take(4).map(|x| x.tokens.clone()).collect();
        let r = group_probe(&p, t, &harmful, &ProbeConfig::new(1e-3, ProbeCondition::PassRateWithoutFull)).unwrap();
        assert_eq!(r.delta_grp, 0.0);
    }

    #[test]
    fn probes_leave_policy_untouched() {
        let (c, p) = setup();
        let before = p.clone();
        let t = &c.tasks[1];
        let g = group_for(&p, t);
        for cond in ProbeCondition::ALL {
            group_probe(&p, t, &g, &ProbeConfig::new(1e-2, cond)).unwrap();
            sample_probe(&p, t, &g, 0, &ProbeConfig::new(1e-2, cond)).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn sample_probe_signs() {
        let (c, p) = setup();
        let t = &c.tasks[2];
        let full = t.y_full().tokens.clone();
        let other = t.programs.iter().find(|x| x.mode == Mode::Other).unwrap().tokens.clone();
        // y_i = y_full with A_i > 0
        let group = vec![full, other.clone(), other];
        let cfg = ProbeConfig::new(1e-3, ProbeCondition::PassRateWithoutFull);
        assert!(sample_probe(&p, t, &group, 0, &cfg).unwrap() > 0.0);
        assert!(sample_probe(&p, t, &group, 3, &cfg).is_err());
        // but a group probe rejects it
        assert!(group_probe(&p, t, &group, &cfg).is_err());
    }

    #[test]
    fn zero_advantage_sample_has_zero_delta() {
        let (c, p) = setup();
        let t = &c.tasks[0];
        let g = group_for(&p, t);
        let cfg = ProbeConfig::new(1e-3, ProbeCondition::PassRateWithFull);
        let mut pg = build_probe_group(t, &g, &cfg).unwrap();
        assert_ne!(sample_delta(&p, t, &pg, 0, &cfg).unwrap(), 0.0);
        pg.advantages[0] = 0.0;
        assert_eq!(sample_delta(&p, t, &pg, 0, &cfg).unwrap(), 0.0);
        let harm = t.programs.iter().find(|x| x.mode == Mode::Harmful).unwrap();
        let same = vec![harm.tokens.clone(), harm.tokens.clone()];
        let cfg = ProbeConfig::new(1e-3, ProbeCondition::PassRateWithoutFull);
        assert_eq!(sample_probe(&p, t, &same, 0, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn conflict_report_cases() {
        let s = |mode, pass_rate, advantage| JudgedSample { mode: Some(mode), pass_rate, advantage };
        let both = JudgedGroup {
            task_id: "a".into(),
            samples: vec![s(Mode::Harmful, 0.84, 0.9), s(Mode::Helpful, 0.75, -0.2), s(Mode::Other, 0.0, -1.0)],
        };
        let helpful_only = JudgedGroup { task_id: "b".into(), samples: vec![s(Mode::Helpful, 0.9, 1.0), s(Mode::Other, 0.0, -1.0)] };
        let r = conflict_report(&[both.clone(), helpful_only]).unwrap();
        assert_eq!(r.tasks_any_judged, 2);
        assert_eq!(r.tasks_with_both, 1);
        assert_eq!(r.reversal_count, 1);
        assert_eq!(r.reversal_rate, 1.0);
        assert_eq!(r.conflict_count, 1);
        assert_eq!(r.conflict_rate, 0.5);

        let unlabeled = JudgedGroup { task_id: "c".into(), samples: vec![JudgedSample { mode: None, pass_rate: 0.0, advantage: 0.0 }] };
        assert!(conflict_report(&[unlabeled]).is_err());

        let no_reversal = JudgedGroup {
            task_id: "d".into(),
            samples: vec![s(Mode::Harmful, 0.5, 0.1), s(Mode::Helpful, 0.6, 0.2)],
        };
        let r = conflict_report(&[no_reversal]).unwrap();
        assert_eq!((r.tasks_with_both, r.reversal_count, r.reversal_rate), (1, 0, 0.0));
        assert_eq!(conflict_report(&[]).unwrap(), ConflictReport::default());
    }

    #[test]
    fn study_is_deterministic_and_complete() {
        let (c, p) = setup();
        let mut st = StudySettings::new(5);
        st.etas = vec![1e-3];
        let a = run_study(&p, &c, &st).unwrap();
        let b = run_study(&p, &c, &st).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tasks.len() + a.skipped.len(), c.tasks.len());
        for t in &a.tasks {
            assert_eq!(t.reports.len(), 4);
        }
        let r = a.conflicts(1e-3).unwrap();
        assert!(r.reversal_rate == 1.0 || r.tasks_with_both == 0);
    }
}
