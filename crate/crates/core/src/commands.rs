//! The CLI subcommands. Each writes its files through an [`OutputGuard`], so
//! a failing command leaves no partial outputs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{CorpusSource, ExperimentConfig, ReweightSection, TrainSection};
use crate::corpus::{gen_conflict_corpus_with, gen_easy_corpus_with, Corpus, GenOptions};
use crate::error::{Error, Result};
use crate::harness::{eval_suite, SuiteOptions};
use crate::metrics::{density_report, pass_at_k, solvability_overlap};
use crate::policy::Policy;
use crate::probe::{run_study, ProbeCondition};
use crate::report::{ensure_dir, fmt_f64, write_csv, write_text, OutputGuard};
use crate::reward::{calibrate_tier_weights, label_from_signal, tier_difficulty_input, RewardKind, RewardSpec};
use crate::seed;
use crate::trainer::train;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TRACE_FILE: &str = "train_trace.csv";
pub const FINAL_POLICY_FILE: &str = "policy_final.snap";
pub const SNAPSHOT_DIR: &str = "snapshots";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    Gen,
    Train,
    Probe,
    Report,
    Exec,
}

/// A loaded config with command-line overrides applied.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub workers: usize,
}

impl Context {
    pub fn new(
        mut config: ExperimentConfig,
        seed: Option<u64>,
        workers: Option<usize>,
        out: Option<PathBuf>,
    ) -> Result<Context> {
        if let Some(s) = seed {
            config.seed = s;
        }
        let out = out.or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
        let workers = workers
            .or(config.workers)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if workers == 0 {
            return Err(Error::invalid("--workers must be positive"));
        }
        config.validate()?;
        Ok(Context { config, out, workers })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    fn section<'a, T>(&self, s: &'a Option<T>, name: &str) -> Result<&'a T> {
        s.as_ref().ok_or_else(|| Error::Config(format!("config has no [{name}] table")))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

pub fn run(cmd: Subcommand, ctx: &Context) -> Result<Vec<PathBuf>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.workers)
        .build()
        .map_err(|e| Error::Environment(format!("cannot start worker pool: {e}")))?;
    ensure_dir(&ctx.out)?;
    pool.install(|| match cmd {
        Subcommand::Gen => cmd_gen(ctx),
        Subcommand::Train => cmd_train(ctx),
        Subcommand::Probe => cmd_probe(ctx),
        Subcommand::Report => cmd_report(ctx),
        Subcommand::Exec => cmd_exec(ctx),
    })
}

pub fn load_corpus(ctx: &Context) -> Result<Corpus> {
    let source = ctx.section(&ctx.config.corpus, "corpus")?;
    let seed = ctx.seed();
    match source {
        CorpusSource::Conflict { tasks, tests, harmful_pass_fraction, test_correlation } => gen_conflict_corpus_with(
            *tasks,
            *tests,
            *harmful_pass_fraction,
            seed,
            &GenOptions { test_correlation: *test_correlation },
        ),
        CorpusSource::Easy { tasks, tests, test_correlation } => {
            gen_easy_corpus_with(*tasks, *tests, seed, &GenOptions { test_correlation: *test_correlation })
        }
        CorpusSource::File { path } => Corpus::read(path),
    }
}

pub fn cmd_gen(ctx: &Context) -> Result<Vec<PathBuf>> {
    let corpus = load_corpus(ctx)?;
    let mut guard = OutputGuard::new();
    write_text(&guard.track(ctx.path(CORPUS_FILE)), &corpus.to_jsonl())?;
    Ok(guard.commit())
}

/// Per-test weights from three tiers trained with the pass-rate reward.
/// Returns the weights and the rows of `difficulty.csv`.
fn reweight_weights(
    ctx: &Context,
    corpus: &Corpus,
    train_cfg: &TrainSection,
    rw: &ReweightSection,
) -> Result<(HashMap<String, Vec<f64>>, Vec<Vec<String>>)> {
    let init = Policy::uniform(corpus)?;
    let tiers = rw
        .tier_steps
        .iter()
        .enumerate()
        .map(|(i, &steps)| {
            if steps == 0 {
                return Ok(init.clone());
            }
            let mut cfg = train_cfg.to_train_config(seed::derive(ctx.seed(), &["tier", &i.to_string()]));
            cfg.steps = steps;
            cfg.reward = RewardSpec::new(RewardKind::PassRate);
            cfg.snapshot_every = None;
            Ok(train(&cfg, corpus, &init, None)?.policy)
        })
        .collect::<Result<Vec<_>>>()?;
    let model_weights = calibrate_tier_weights(corpus, &tiers)?;
    let mut weights = HashMap::new();
    let mut rows = Vec::new();
    for task in &corpus.tasks {
        let input = tier_difficulty_input(task, &tiers, &model_weights, rw.epsilon)?;
        let signal = input.pass_signal()?;
        let labels = label_from_signal(&signal, rw.epsilon)?;
        let w = train_cfg.reward.weights_for(&labels)?;
        for (j, ((p, l), wj)) in signal.iter().zip(&labels).zip(&w).enumerate() {
            rows.push(vec![task.id.clone(), j.to_string(), fmt_f64(*p), format!("{l:?}").to_uppercase(), fmt_f64(*wj)]);
        }
        weights.insert(task.id.clone(), w);
    }
    Ok((weights, rows))
}

pub fn cmd_train(ctx: &Context) -> Result<Vec<PathBuf>> {
    let section = ctx.section(&ctx.config.train, "train")?;
    let corpus = load_corpus(ctx)?;
    let cfg = section.to_train_config(ctx.seed());
    let init = Policy::uniform(&corpus)?;
    let mut guard = OutputGuard::new();

    let weights = match (cfg.reward.kind, &ctx.config.reweight) {
        (RewardKind::Reweighted, Some(rw)) => {
            let (w, rows) = reweight_weights(ctx, &corpus, section, rw)?;
            write_csv(
                &guard.track(ctx.path("difficulty.csv")),
                &["task_id", "test_index", "pass_signal", "label", "weight"],
                &rows,
            )?;
            Some(w)
        }
        (RewardKind::Reweighted, None) => return Err(Error::Config("the reweighted reward needs a [reweight] table".into())),
        _ => None,
    };

    let outcome = train(&cfg, &corpus, &init, weights.as_ref())?;
    let t = &outcome.trace;
    let rows: Vec<Vec<String>> = t
        .records
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                fmt_f64(r.mean_reward),
                fmt_f64(r.effective_group_frac),
                fmt_f64(r.solved_rate),
                t.reward_kind.to_string(),
                t.method.to_string(),
                t.seed.to_string(),
            ]
        })
        .collect();
    write_csv(
        &guard.track(ctx.path(TRACE_FILE)),
        &["step", "mean_reward", "effective_group_frac", "solved_rate", "reward_kind", "method", "seed"],
        &rows,
    )?;
    if !outcome.snapshots.is_empty() {
        ensure_dir(&ctx.path(SNAPSHOT_DIR))?;
        for (name, p) in &outcome.snapshots {
            p.write_snapshot(&guard.track(ctx.path(SNAPSHOT_DIR).join(format!("{name}.snap"))))?;
        }
    }
    outcome.policy.write_snapshot(&guard.track(ctx.path(FINAL_POLICY_FILE)))?;
    Ok(guard.commit())
}

pub fn cmd_probe(ctx: &Context) -> Result<Vec<PathBuf>> {
    let section = ctx.section(&ctx.config.probe, "probe")?;
    let corpus = load_corpus(ctx)?;
    let policy = match &section.policy {
        Some(p) => Policy::read_snapshot(p)?,
        None => Policy::uniform(&corpus)?,
    };
    let settings = section.settings(ctx.seed());
    let study = run_study(&policy, &corpus, &settings)?;
    for id in &study.skipped {
        eprintln!("probe: skipped {id}: every sampled group contained a full-pass program");
    }

    let mut rows = Vec::new();
    for t in &study.tasks {
        for r in &t.reports {
            let norm = r.delta_grp_raw / corpus.task(&t.task_id).expect("probed task").y_full().tokens.len() as f64;
            rows.push(vec![
                t.task_id.clone(),
                r.condition.to_string(),
                r.method.to_string(),
                fmt_f64(r.eta),
                fmt_f64(r.delta_grp_raw),
                fmt_f64(norm),
            ]);
        }
    }
    // per-sample rows come from the pass-rate, without-full probe at the first step size
    let eta0 = settings.etas[0];
    let mut sample_rows = Vec::new();
    for t in &study.tasks {
        let Some(r) = t
            .reports
            .iter()
            .find(|r| r.condition == ProbeCondition::PassRateWithoutFull && r.eta == eta0)
        else {
            continue;
        };
        let len = corpus.task(&t.task_id).expect("probed task").y_full().tokens.len() as f64;
        for i in 0..r.group.sequences.len() {
            let d = if r.normalized { r.per_sample[i] } else { r.per_sample[i] / len };
            sample_rows.push(vec![
                t.task_id.clone(),
                i.to_string(),
                r.group.modes[i].to_string(),
                fmt_f64(r.group.pass_rates[i]),
                fmt_f64(r.group.advantages[i]),
                fmt_f64(d),
            ]);
        }
    }

    let mut guard = OutputGuard::new();
    write_csv(
        &guard.track(ctx.path("probe.csv")),
        &["task_id", "condition", "method", "eta", "delta_grp", "delta_grp_norm"],
        &rows,
    )?;
    write_csv(
        &guard.track(ctx.path("probe_samples.csv")),
        &["task_id", "sample_index", "mode", "pass_rate", "advantage", "delta_i_norm"],
        &sample_rows,
    )?;
    if settings.conditions.contains(&ProbeCondition::PassRateWithoutFull) {
        let c = study.conflicts(eta0)?;
        write_csv(
            &guard.track(ctx.path("conflict.csv")),
            &["tasks_any_judged", "tasks_with_both", "reversal_count", "reversal_rate", "conflict_count", "conflict_rate"],
            &[vec![
                c.tasks_any_judged.to_string(),
                c.tasks_with_both.to_string(),
                c.reversal_count.to_string(),
                fmt_f64(c.reversal_rate),
                c.conflict_count.to_string(),
                fmt_f64(c.conflict_rate),
            ]],
        )?;
    }
    Ok(guard.commit())
}

fn run_label(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Per-task evaluation of one policy: full-pass counts and sample pass rates.
struct RunEval {
    label: String,
    passes: Vec<u64>,
    pass_rates: Vec<Vec<f64>>,
}

fn evaluate_run(ctx: &Context, corpus: &Corpus, dir: &Path, samples: usize) -> Result<RunEval> {
    let policy = Policy::read_snapshot(&dir.join(FINAL_POLICY_FILE))?;
    policy.check_corpus(corpus)?;
    let per_task = corpus
        .tasks
        .par_iter()
        .map(|task| -> Result<(u64, Vec<f64>)> {
            // the same draws for every run, so identical policies agree exactly
            let s = seed::derive(seed::task_seed(ctx.seed(), &task.id), &["eval"]);
            let seqs = policy.sample(task, samples, s)?;
            let mut c = 0;
            let mut rates = Vec::with_capacity(samples);
            for y in &seqs {
                let (pv, _) = task.outcome(y);
                c += u64::from(pv.is_full_pass());
                rates.push(crate::corpus::pass_rate(&pv)?);
            }
            Ok((c, rates))
        })
        .collect::<Result<Vec<_>>>()?;
    let (passes, pass_rates) = per_task.into_iter().unzip();
    Ok(RunEval { label: run_label(dir), passes, pass_rates })
}

pub fn cmd_report(ctx: &Context) -> Result<Vec<PathBuf>> {
    let section = ctx.section(&ctx.config.report, "report")?;
    let corpus = load_corpus(ctx)?;
    let n = section.eval_samples;
    let evals = section
        .runs
        .iter()
        .map(|d| evaluate_run(ctx, &corpus, d, n))
        .collect::<Result<Vec<_>>>()?;

    let mut header = vec!["corpus".to_string(), "run".to_string()];
    header.extend(section.ks.iter().map(|k| format!("pass@{k}")));
    let mut metric_rows = Vec::new();
    for e in &evals {
        let mut row = vec![corpus.name.clone(), e.label.clone()];
        for &k in &section.ks {
            let total = e.passes.iter().map(|&c| pass_at_k(n as u64, c, k)).sum::<Result<f64>>()?;
            row.push(fmt_f64(total / corpus.tasks.len() as f64));
        }
        metric_rows.push(row);
    }

    let universe: Vec<&str> = corpus.tasks.iter().map(|t| t.id.as_str()).collect();
    let solved = |e: &RunEval| -> Vec<&str> {
        corpus.tasks.iter().zip(&e.passes).filter(|(_, c)| **c > 0).map(|(t, _)| t.id.as_str()).collect()
    };
    let mut overlap_rows = Vec::new();
    for i in 0..evals.len() {
        for j in i + 1..evals.len() {
            let m = solvability_overlap(&solved(&evals[i]), &solved(&evals[j]), &universe)?;
            overlap_rows.push(vec![
                evals[i].label.clone(),
                evals[j].label.clone(),
                m.both_solved.to_string(),
                m.a_only.to_string(),
                m.b_only.to_string(),
                m.both_failed.to_string(),
                fmt_f64(m.agreement()),
            ]);
        }
    }

    let mut density_rows = Vec::new();
    for e in &evals {
        let d = density_report(&e.pass_rates)?;
        let ineffective = d.total_groups - d.effective_groups;
        let buckets = std::iter::once((1usize, ineffective)).chain(d.distinct_counts.iter().map(|(k, v)| (*k, *v)));
        for (distinct, groups) in buckets {
            density_rows.push(vec![
                e.label.clone(),
                d.total_groups.to_string(),
                d.effective_groups.to_string(),
                fmt_f64(d.intermediate_fraction),
                distinct.to_string(),
                groups.to_string(),
            ]);
        }
    }

    let mut guard = OutputGuard::new();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&guard.track(ctx.path("metrics.csv")), &header_refs, &metric_rows)?;
    write_csv(
        &guard.track(ctx.path("overlap.csv")),
        &["run_a", "run_b", "both_solved", "a_only", "b_only", "both_failed", "agreement"],
        &overlap_rows,
    )?;
    write_csv(
        &guard.track(ctx.path("density.csv")),
        &["run", "total_groups", "effective_groups", "intermediate_fraction", "distinct_values", "groups"],
        &density_rows,
    )?;
    Ok(guard.commit())
}

pub fn cmd_exec(ctx: &Context) -> Result<Vec<PathBuf>> {
    let section = ctx.section(&ctx.config.exec, "exec")?;
    let opts = SuiteOptions {
        command: section.interpreter.clone(),
        policy: section.timeout_policy(),
        memory_mb: section.memory_limit(),
        workers: ctx.workers,
    };
    let report = eval_suite(&section.problem, &opts)?;
    eprintln!(
        "exec: timeout {}s (canonical runtime {})",
        report.timeout,
        report.canonical_runtime.map_or("none".to_string(), |t| format!("{t:.3}s"))
    );
    let mut runs = Vec::new();
    let mut rewards = Vec::new();
    for c in &report.candidates {
        for (i, r) in c.result.runs.iter().enumerate() {
            runs.push(vec![c.name.clone(), i.to_string(), r.outcome.to_string(), r.wall.as_millis().to_string()]);
        }
        rewards.push(vec![c.name.clone(), fmt_f64(c.binary), fmt_f64(c.pass_rate)]);
    }
    let mut guard = OutputGuard::new();
    write_csv(&guard.track(ctx.path("exec_report.csv")), &["candidate", "test_index", "outcome", "wall_ms"], &runs)?;
    write_csv(&guard.track(ctx.path("rewards.csv")), &["candidate", "binary", "pass_rate"], &rewards)?;
    Ok(guard.commit())
}
