//! Strict on-policy training: every batch is sampled from the current policy
//! and consumed by exactly one update. No KL or entropy terms.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Mode, PassVector, Task};
use crate::error::{Error, Result};
use crate::estimator::{advantages, Method, StdConvention, DEFAULT_EPSILON};
use crate::policy::{Gradient, Policy};
use crate::reward::{reward_for_step, RewardKind, RewardSpec};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_tasks: usize,
    pub group_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub reward: RewardSpec,
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub std: StdConvention,
    /// Keep a policy snapshot every this many updates.
    #[serde(default)]
    pub snapshot_every: Option<usize>,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl TrainConfig {
    pub fn new(reward: RewardSpec, method: Method) -> Self {
        TrainConfig {
            batch_tasks: 64,
            group_size: 16,
            steps: 768,
            learning_rate: 0.1,
            reward,
            method,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            std: StdConvention::Population,
            snapshot_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_tasks == 0 || self.steps == 0 {
            return Err(Error::invalid("batch_tasks and steps must be positive"));
        }
        if self.group_size < 2 {
            return Err(Error::invalid("group_size must be >= 2"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if self.snapshot_every == Some(0) {
            return Err(Error::invalid("snapshot_every must be positive"));
        }
        self.reward.validate()
    }
}

/// N rollouts for one task, scored under one reward.
#[derive(Clone, Debug)]
pub struct RolloutGroup<'a> {
    pub task: &'a Task,
    pub sequences: Vec<Vec<u32>>,
    pub pass_vectors: Vec<PassVector>,
    pub modes: Vec<Mode>,
    pub rewards: Vec<f64>,
}

impl RolloutGroup<'_> {
    pub fn has_full_pass(&self) -> bool {
        self.pass_vectors.iter().any(PassVector::is_full_pass)
    }
}

/// Samples `n` rollouts and scores them with the reward active at `step`.
pub fn sample_group<'a>(
    policy: &Policy,
    task: &'a Task,
    n: usize,
    rng_seed: u64,
    reward: &RewardSpec,
    step: usize,
    test_weights: Option<&[f64]>,
) -> Result<RolloutGroup<'a>> {
    let sequences = policy.sample(task, n, rng_seed)?;
    let (pass_vectors, modes): (Vec<_>, Vec<_>) = sequences.iter().map(|s| task.outcome(s)).unzip();
    let rewards = pass_vectors
        .iter()
        .map(|pv| reward_for_step(reward, step, pv, test_weights))
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutGroup { task, sequences, pass_vectors, modes, rewards })
}

/// `Σ_groups Σ_i A_i ∇log π(y_i|x)`, divided by the number of sequences.
pub fn update_direction(policy: &Policy, groups: &[(&Task, &[Vec<u32>], &[f64])]) -> Result<Gradient> {
    let mut dir = Gradient::zeros(policy.layout());
    let mut count = 0usize;
    for (task, seqs, adv) in groups {
        if seqs.len() != adv.len() {
            return Err(Error::invalid("sequence and advantage counts differ"));
        }
        for (s, a) in seqs.iter().zip(adv.iter()) {
            policy.accumulate_grad(task, s, *a, &mut dir)?;
        }
        count += seqs.len();
    }
    if count > 0 && !dir.is_zero() {
        dir.scale(1.0 / count as f64);
    }
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub mean_reward: f64,
    pub effective_group_frac: f64,
    pub solved_rate: f64,
    pub solved_tasks: Vec<String>,
}

/// One policy-gradient update from groups sampled under `policy`.
pub fn step(policy: &Policy, batch: &[RolloutGroup<'_>], cfg: &TrainConfig) -> Result<(Policy, StepStats)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let advs = batch
        .iter()
        .map(|g| advantages(cfg.method, &g.rewards, cfg.epsilon, cfg.std))
        .collect::<Result<Vec<_>>>()?;
    let groups: Vec<(&Task, &[Vec<u32>], &[f64])> = batch
        .iter()
        .zip(&advs)
        .map(|(g, a)| (g.task, g.sequences.as_slice(), a.advantages.as_slice()))
        .collect();
    let dir = update_direction(policy, &groups)?;
    let next = if cfg.learning_rate > 0.0 && !dir.is_zero() {
        policy.apply_update(&dir, cfg.learning_rate)?
    } else {
        policy.clone()
    };

    let n_samples: usize = batch.iter().map(|g| g.rewards.len()).sum();
    let mut solved_tasks: Vec<String> = batch.iter().filter(|g| g.has_full_pass()).map(|g| g.task.id.clone()).collect();
    let solved = solved_tasks.len();
    solved_tasks.sort();
    solved_tasks.dedup();
    let stats = StepStats {
        mean_reward: batch.iter().flat_map(|g| &g.rewards).sum::<f64>() / n_samples as f64,
        effective_group_frac: advs.iter().filter(|a| a.is_effective()).count() as f64 / batch.len() as f64,
        solved_rate: solved as f64 / batch.len() as f64,
        solved_tasks,
    };
    Ok((next, stats))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Number of updates applied to the policy that generated this batch.
    pub sampled_version: usize,
    /// Number of updates applied to the policy this step updated.
    pub updated_version: usize,
    pub mean_reward: f64,
    pub effective_group_frac: f64,
    pub solved_rate: f64,
    pub solved_tasks: Vec<String>,
    pub snapshot: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTrace {
    pub reward_kind: RewardKind,
    pub method: Method,
    pub seed: u64,
    pub records: Vec<StepRecord>,
}

impl TrainTrace {
    /// Tasks solved at least once over the whole run.
    pub fn solved_tasks(&self) -> Vec<String> {
        let mut all: Vec<String> = self.records.iter().flat_map(|r| r.solved_tasks.iter().cloned()).collect();
        all.sort();
        all.dedup();
        all
    }
}

pub struct TrainOutcome {
    pub trace: TrainTrace,
    pub policy: Policy,
    pub snapshots: Vec<(String, Policy)>,
}

pub fn snapshot_name(updates: usize) -> String {
    format!("policy_step_{updates:06}")
}

/// Runs `cfg.steps` on-policy updates. `test_weights` maps task id to
/// per-test weights and is required for the reweighted reward.
pub fn train(
    cfg: &TrainConfig,
    corpus: &Corpus,
    init: &Policy,
    test_weights: Option<&HashMap<String, Vec<f64>>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.tasks.is_empty() {
        return Err(Error::invalid("corpus has no tasks"));
    }
    init.check_corpus(corpus)?;
    let weights_for = |task: &Task| -> Result<Option<&[f64]>> {
        if cfg.reward.kind != RewardKind::Reweighted {
            return Ok(None);
        }
        test_weights
            .and_then(|m| m.get(&task.id))
            .map(|w| Some(w.as_slice()))
            .ok_or_else(|| Error::invalid(format!("no test weights for task {}", task.id)))
    };

    let mut policy = init.clone();
    let mut version = 0usize;
    let mut records = Vec::with_capacity(cfg.steps);
    let mut snapshots = Vec::new();

    for s in 0..cfg.steps {
        let step_label = s.to_string();
        let mut pick = seed::rng(seed::derive(cfg.seed, &["batch", &step_label]));
        let picked: Vec<usize> = (0..cfg.batch_tasks).map(|_| pick.gen_range(0..corpus.tasks.len())).collect();

        let sampled_version = version;
        let batch = picked
            .par_iter()
            .enumerate()
            .map(|(slot, &ti)| {
                let task = &corpus.tasks[ti];
                let rng_seed = seed::derive(cfg.seed, &["rollout", &step_label, &slot.to_string(), &task.id]);
                sample_group(&policy, task, cfg.group_size, rng_seed, &cfg.reward, s, weights_for(task)?)
            })
            .collect::<Result<Vec<_>>>()?;

        let (next, stats) = step(&policy, &batch, cfg)?;
        drop(batch);
        policy = next;
        version += 1;
        // the batch was drawn from exactly the policy this step updated
        assert_eq!(sampled_version + 1, version);

        let snapshot = match cfg.snapshot_every {
            Some(every) if version % every == 0 => {
                let name = snapshot_name(version);
                snapshots.push((name.clone(), policy.clone()));
                Some(name)
            }
            _ => None,
        };
        records.push(StepRecord {
            step: s,
            sampled_version,
            updated_version: version - 1,
            mean_reward: stats.mean_reward,
            effective_group_frac: stats.effective_group_frac,
            solved_rate: stats.solved_rate,
            solved_tasks: stats.solved_tasks,
            snapshot,
        });
    }

    Ok(TrainOutcome {
        trace: TrainTrace { reward_kind: cfg.reward.kind, method: cfg.method, seed: cfg.seed, records },
        policy,
        snapshots,
    })
}
