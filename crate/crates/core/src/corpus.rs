//! Tasks, candidate-program tables and corpus generators.
//!
//! A task's program table lists fixed-length token sequences together with
//! their per-test outcomes and a ground-truth mode label. Sequences that are
//! not in the table fail every test and count as [`Mode::Other`].

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::seed;

/// Per-test boolean outcomes of one program, test 0 first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct PassVector(Vec<bool>);

impl PassVector {
    pub fn new(bits: Vec<bool>) -> Self {
        PassVector(bits)
    }

    pub fn all_pass(k: usize) -> Self {
        PassVector(vec![true; k])
    }

    pub fn all_fail(k: usize) -> Self {
        PassVector(vec![false; k])
    }

    /// Parses a string of `0`/`1`, most-significant (first) test first.
    pub fn parse(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::invalid(format!("pass bit must be 0 or 1, got {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(PassVector)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn passed(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn is_full_pass(&self) -> bool {
        !self.0.is_empty() && self.0.iter().all(|b| *b)
    }
}

impl fmt::Display for PassVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            f.write_str(if *b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl Serialize for PassVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PassVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PassVector::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Test-case pass rate: passed tests over total tests.
pub fn pass_rate(pv: &PassVector) -> Result<f64> {
    if pv.is_empty() {
        return Err(Error::invalid("pass vector is empty"));
    }
    Ok(pv.passed() as f64 / pv.len() as f64)
}

/// Ground-truth relation of a candidate to the task's references.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Full,
    Helpful,
    Harmful,
    Other,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "FULL",
            Mode::Helpful => "HELPFUL",
            Mode::Harmful => "HARMFUL",
            Mode::Other => "OTHER",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub tokens: Vec<u32>,
    pub pass_bits: PassVector,
    pub mode: Mode,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub id: String,
    #[serde(rename = "K")]
    pub test_count: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub programs: Vec<Candidate>,
    pub reference_ids: Vec<usize>,
}

/// Length of the common prefix of two token sequences.
pub fn common_prefix(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

impl Task {
    /// Checks every structural invariant of a task.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(format!("task {}: {msg}", self.id)));
        if self.test_count == 0 || self.vocab_size == 0 || self.seq_len == 0 {
            return fail("K, vocab_size and seq_len must be positive".into());
        }
        if self.vocab_size > u32::MAX as usize {
            return fail("vocab_size too large".into());
        }
        let mut seen = HashSet::new();
        for (i, c) in self.programs.iter().enumerate() {
            if c.pass_bits.len() != self.test_count {
                return fail(format!("program {i} has {} pass bits, K={}", c.pass_bits.len(), self.test_count));
            }
            if c.tokens.len() != self.seq_len {
                return fail(format!("program {i} has length {}, seq_len={}", c.tokens.len(), self.seq_len));
            }
            if c.tokens.iter().any(|&t| t as usize >= self.vocab_size) {
                return fail(format!("program {i} has a token outside the vocabulary"));
            }
            if !seen.insert(c.tokens.as_slice()) {
                return fail(format!("program {i} duplicates an earlier token sequence"));
            }
            if (c.mode == Mode::Full) != c.pass_bits.is_full_pass() {
                return fail(format!("program {i}: mode FULL must coincide with an all-ones pass vector"));
            }
        }
        if self.reference_ids.is_empty() {
            return fail("reference_ids is empty".into());
        }
        for &r in &self.reference_ids {
            match self.programs.get(r) {
                None => return fail(format!("reference id {r} out of range")),
                Some(c) if !c.pass_bits.is_full_pass() => {
                    return fail(format!("reference {r} is not full-pass"))
                }
                _ => {}
            }
        }
        let distinct: HashSet<&[u32]> = self
            .reference_ids
            .iter()
            .map(|&r| self.programs[r].tokens.as_slice())
            .collect();
        if distinct.len() < 2 {
            return fail("need at least two distinct references (y_full and its rewrite)".into());
        }
        for (i, c) in self.programs.iter().enumerate() {
            let best = self
                .reference_ids
                .iter()
                .map(|&r| common_prefix(&c.tokens, &self.programs[r].tokens))
                .max()
                .unwrap_or(0);
            match c.mode {
                Mode::Helpful if 2 * best < self.seq_len => {
                    return fail(format!("HELPFUL program {i} shares only a {best}-token prefix with the references"));
                }
                Mode::Harmful if best > 1 => {
                    return fail(format!("HARMFUL program {i} shares a {best}-token prefix with a reference"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn find(&self, tokens: &[u32]) -> Option<usize> {
        self.programs.iter().position(|c| c.tokens == tokens)
    }

    /// Pass vector and mode of an arbitrary sequence. Sequences outside the
    /// table fail every test.
    pub fn outcome(&self, tokens: &[u32]) -> (PassVector, Mode) {
        match self.find(tokens) {
            Some(i) => (self.programs[i].pass_bits.clone(), self.programs[i].mode),
            None => (PassVector::all_fail(self.test_count), Mode::Other),
        }
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() != self.seq_len {
            return Err(Error::invalid(format!(
                "sequence length {} does not match seq_len {}",
                tokens.len(),
                self.seq_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::invalid(format!("token {t} outside vocabulary of size {}", self.vocab_size)));
        }
        Ok(())
    }

    /// The probe target `y_full`: the first reference.
    pub fn y_full(&self) -> &Candidate {
        &self.programs[self.reference_ids[0]]
    }

    /// The rewritten reference: the first reference whose tokens differ from `y_full`.
    pub fn y_full_rewrite(&self) -> Option<&Candidate> {
        let full = &self.y_full().tokens;
        self.reference_ids
            .iter()
            .map(|&r| &self.programs[r])
            .find(|c| &c.tokens != full)
    }
}

pub fn evaluate(task: &Task, candidate_index: usize) -> Result<PassVector> {
    task.programs
        .get(candidate_index)
        .map(|c| c.pass_bits.clone())
        .ok_or_else(|| {
            Error::invalid(format!(
                "candidate index {candidate_index} out of range for task {} ({} programs)",
                task.id,
                task.programs.len()
            ))
        })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub seed: u64,
    pub tasks: Vec<Task>,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for t in &self.tasks {
            if !ids.insert(t.id.as_str()) {
                return Err(Error::invalid(format!("duplicate task id {}", t.id)));
            }
            t.validate()?;
        }
        Ok(())
    }

    pub fn task(&self, id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.id == id)
    }
}

/// All sequences of `vocab^seq_len`, lexicographic.
pub fn sequence_space(vocab: usize, seq_len: usize) -> Vec<Vec<u32>> {
    let total = vocab.pow(seq_len as u32);
    (0..total)
        .map(|mut n| {
            let mut seq = vec![0u32; seq_len];
            for slot in seq.iter_mut().rev() {
                *slot = (n % vocab) as u32;
                n /= vocab;
            }
            seq
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

pub const CONFLICT_VOCAB: usize = 3;
pub const CONFLICT_SEQ_LEN: usize = 4;
/// Share of the far-from-reference region labeled HARMFUL; the rest is OTHER.
pub const CONFLICT_HARMFUL_SHARE: f64 = 0.8;
/// Lowest HELPFUL pass count, as a fraction of K.
pub const CONFLICT_HELPFUL_FLOOR: f64 = 0.4;

pub const EASY_VOCAB: usize = 2;
pub const EASY_SEQ_LEN: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct GenOptions {
    /// Probability in [0,1] that a candidate's passed tests are the easiest
    /// ones under a shared per-task test ordering (nested pass sets) instead
    /// of a uniformly random subset.
    pub test_correlation: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions { test_correlation: 0.0 }
    }
}

/// Number of tests a HARMFUL conflict candidate passes: `ceil(f*K)`.
pub fn harmful_pass_count(k: usize, harmful_pass_fraction: f64) -> Result<usize> {
    if !(harmful_pass_fraction > 0.0 && harmful_pass_fraction < 1.0) {
        return Err(Error::invalid("harmful_pass_fraction must lie in (0,1)"));
    }
    if k < 4 {
        return Err(Error::invalid("conflict corpora need K >= 4"));
    }
    // slack absorbs representation error, e.g. 0.84*25 = 21.000000000000004
    let h = (harmful_pass_fraction * k as f64 - 1e-9).ceil() as usize;
    if h >= k {
        return Err(Error::invalid(format!(
            "ceil({harmful_pass_fraction}*{k}) = {h} would make HARMFUL candidates full-pass"
        )));
    }
    if h < 2 {
        return Err(Error::invalid(format!(
            "ceil({harmful_pass_fraction}*{k}) = {h} leaves no room for a partial HELPFUL candidate below it"
        )));
    }
    Ok(h)
}

fn pass_subset<R: Rng>(rng: &mut R, order: &[usize], count: usize, correlation: f64) -> PassVector {
    let k = order.len();
    let mut bits = vec![false; k];
    if rng.gen::<f64>() < correlation {
        for &t in &order[..count] {
            bits[t] = true;
        }
    } else {
        for t in rand::seq::index::sample(rng, k, count) {
            bits[t] = true;
        }
    }
    PassVector(bits)
}

pub fn gen_conflict_corpus(n_tasks: usize, k: usize, harmful_pass_fraction: f64, seed: u64) -> Result<Corpus> {
    gen_conflict_corpus_with(n_tasks, k, harmful_pass_fraction, seed, &GenOptions::default())
}

/// Builds tasks where a far-from-reference HARMFUL mode out-passes the
/// near-miss HELPFUL mode. Each task enumerates the whole sequence space.
pub fn gen_conflict_corpus_with(
    n_tasks: usize,
    k: usize,
    harmful_pass_fraction: f64,
    seed: u64,
    opts: &GenOptions,
) -> Result<Corpus> {
    if n_tasks == 0 {
        return Err(Error::invalid("n_tasks must be >= 1"));
    }
    check_correlation(opts)?;
    let harmful = harmful_pass_count(k, harmful_pass_fraction)?;
    let helpful_lo = ((CONFLICT_HELPFUL_FLOOR * k as f64).round() as usize).clamp(1, harmful - 1);
    let (vocab, len) = (CONFLICT_VOCAB, CONFLICT_SEQ_LEN);
    let space = sequence_space(vocab, len);

    let tasks = (0..n_tasks)
        .map(|i| {
            let id = format!("conflict-{i:04}");
            let mut rng = seed::rng(seed::derive(seed, &["gen-conflict", &id]));
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut rng);

            let reference: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect();
            let mut rewrite = reference.clone();
            let shift = rng.gen_range(1..vocab as u32);
            rewrite[len - 1] = (reference[len - 1] + shift) % vocab as u32;

            let mut programs = Vec::with_capacity(space.len());
            let mut far = Vec::new();
            for s in &space {
                let pfx = common_prefix(s, &reference).max(common_prefix(s, &rewrite));
                let cand = if *s == reference || *s == rewrite {
                    Candidate { tokens: s.clone(), pass_bits: PassVector::all_pass(k), mode: Mode::Full }
                } else if 2 * pfx >= len {
                    let count = rng.gen_range(helpful_lo..harmful);
                    let bits = pass_subset(&mut rng, &order, count, opts.test_correlation);
                    Candidate { tokens: s.clone(), pass_bits: bits, mode: Mode::Helpful }
                } else {
                    if pfx <= 1 {
                        far.push(programs.len());
                    }
                    Candidate { tokens: s.clone(), pass_bits: PassVector::all_fail(k), mode: Mode::Other }
                };
                programs.push(cand);
            }

            far.shuffle(&mut rng);
            let n_harmful = ((CONFLICT_HARMFUL_SHARE * far.len() as f64).round() as usize).clamp(1, far.len() - 1);
            let mut chosen = far[..n_harmful].to_vec();
            chosen.sort_unstable();
            for idx in chosen {
                programs[idx].pass_bits = pass_subset(&mut rng, &order, harmful, opts.test_correlation);
                programs[idx].mode = Mode::Harmful;
            }

            let reference_ids = vec![
                programs.iter().position(|c| c.tokens == reference).expect("reference enumerated"),
                programs.iter().position(|c| c.tokens == rewrite).expect("rewrite enumerated"),
            ];
            Task { id, test_count: k, vocab_size: vocab, seq_len: len, programs, reference_ids }
        })
        .collect();

    let corpus = Corpus { name: format!("conflict-k{k}-f{harmful_pass_fraction}"), seed, tasks };
    corpus.validate()?;
    Ok(corpus)
}

pub fn gen_easy_corpus(n_tasks: usize, k: usize, seed: u64) -> Result<Corpus> {
    gen_easy_corpus_with(n_tasks, k, seed, &GenOptions::default())
}

/// Small fully enumerated tasks with two or three FULL candidates each.
pub fn gen_easy_corpus_with(n_tasks: usize, k: usize, seed: u64, opts: &GenOptions) -> Result<Corpus> {
    if n_tasks == 0 {
        return Err(Error::invalid("n_tasks must be >= 1"));
    }
    if k == 0 {
        return Err(Error::invalid("K must be >= 1"));
    }
    check_correlation(opts)?;
    let (vocab, len) = (EASY_VOCAB, EASY_SEQ_LEN);
    let space = sequence_space(vocab, len);

    let tasks = (0..n_tasks)
        .map(|i| {
            let id = format!("easy-{i:04}");
            let mut rng = seed::rng(seed::derive(seed, &["gen-easy", &id]));
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut rng);
            let n_full = rng.gen_range(2..=3);
            let mut full_idx: Vec<usize> = rand::seq::index::sample(&mut rng, space.len(), n_full).into_vec();
            full_idx.sort_unstable();

            let mut programs: Vec<Candidate> = space
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    if full_idx.contains(&j) {
                        Candidate { tokens: s.clone(), pass_bits: PassVector::all_pass(k), mode: Mode::Full }
                    } else {
                        let count = rng.gen_range(0..k);
                        let bits = pass_subset(&mut rng, &order, count, opts.test_correlation);
                        Candidate { tokens: s.clone(), pass_bits: bits, mode: Mode::Other }
                    }
                })
                .collect();
            for c in programs.iter_mut().filter(|c| c.mode != Mode::Full) {
                let near = full_idx.iter().any(|&r| 2 * common_prefix(&c.tokens, &space[r]) >= len);
                if near {
                    c.mode = Mode::Helpful;
                }
            }
            Task { id, test_count: k, vocab_size: vocab, seq_len: len, programs, reference_ids: full_idx }
        })
        .collect();

    let corpus = Corpus { name: format!("easy-k{k}"), seed, tasks };
    corpus.validate()?;
    Ok(corpus)
}

fn check_correlation(opts: &GenOptions) -> Result<()> {
    if !(0.0..=1.0).contains(&opts.test_correlation) {
        return Err(Error::invalid("test_correlation must lie in [0,1]"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

pub const CORPUS_FORMAT: &str = "rlvr-lab-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusHeader {
    format: String,
    version: u32,
    name: String,
    seed: u64,
    tasks: usize,
}

impl Corpus {
    /// Header line followed by one task per line.
    pub fn to_jsonl(&self) -> String {
        let header = CorpusHeader {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            name: self.name.clone(),
            seed: self.seed,
            tasks: self.tasks.len(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for t in &self.tasks {
            out.push_str(&serde_json::to_string(t).expect("task serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Corpus> {
        let mut lines = reader.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| Error::Format("corpus file is empty".into()))?;
        let first = first.map_err(|e| Error::Format(e.to_string()))?;
        let header: CorpusHeader =
            serde_json::from_str(&first).map_err(|e| Error::Format(format!("line 1: {e}")))?;
        if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
            return Err(Error::Format(format!(
                "line 1: unsupported corpus format {} v{}",
                header.format, header.version
            )));
        }
        let mut tasks = Vec::with_capacity(header.tasks);
        for (i, line) in lines {
            let line = line.map_err(|e| Error::Format(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let task: Task =
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            tasks.push(task);
        }
        if tasks.len() != header.tasks {
            return Err(Error::Format(format!(
                "header announces {} tasks, file has {}",
                header.tasks,
                tasks.len()
            )));
        }
        let corpus = Corpus { name: header.name, seed: header.seed, tasks };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Corpus> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Corpus::from_reader(BufReader::new(f))
    }
}
