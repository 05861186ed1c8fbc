//! Order-1 autoregressive tabular softmax policy.
//!
//! Each task owns a logit table indexed by `(position, previous token, token)`,
//! where the previous token at position 0 is a begin marker stored at index
//! `vocab`. Log-probabilities and their gradients are exact.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};

use crate::corpus::{Corpus, Task};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableShape {
    pub task_id: String,
    pub seq_len: usize,
    pub vocab: usize,
    pub offset: usize,
}

impl TableShape {
    fn len(&self) -> usize {
        self.seq_len * (self.vocab + 1) * self.vocab
    }

    /// Start of the logit slice for `(position, prev)`; `prev == None` is the begin marker.
    fn slice_start(&self, position: usize, prev: Option<u32>) -> usize {
        let prev = prev.map_or(self.vocab, |p| p as usize);
        self.offset + (position * (self.vocab + 1) + prev) * self.vocab
    }
}

/// Parameter index space shared by a policy and its gradients.
#[derive(Debug)]
pub struct Layout {
    tables: Vec<TableShape>,
    index: HashMap<String, usize>,
    total: usize,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.tables == other.tables
    }
}

impl Layout {
    pub fn new(dims: impl IntoIterator<Item = (String, usize, usize)>) -> Result<Arc<Layout>> {
        let mut tables = Vec::new();
        let mut index = HashMap::new();
        let mut offset = 0;
        for (task_id, seq_len, vocab) in dims {
            if seq_len == 0 || vocab == 0 {
                return Err(Error::invalid(format!("task {task_id}: empty table shape")));
            }
            if index.insert(task_id.clone(), tables.len()).is_some() {
                return Err(Error::invalid(format!("duplicate task id {task_id} in layout")));
            }
            let shape = TableShape { task_id, seq_len, vocab, offset };
            offset += shape.len();
            tables.push(shape);
        }
        Ok(Arc::new(Layout { tables, index, total: offset }))
    }

    pub fn for_corpus(corpus: &Corpus) -> Result<Arc<Layout>> {
        Layout::new(corpus.tasks.iter().map(|t| (t.id.clone(), t.seq_len, t.vocab_size)))
    }

    pub fn tables(&self) -> &[TableShape] {
        &self.tables
    }

    pub fn total(&self) -> usize {
        self.total
    }

    fn shape_for(&self, task: &Task) -> Result<&TableShape> {
        let shape = self
            .index
            .get(&task.id)
            .map(|&i| &self.tables[i])
            .ok_or_else(|| Error::invalid(format!("policy has no table for task {}", task.id)))?;
        if shape.seq_len != task.seq_len || shape.vocab != task.vocab_size {
            return Err(Error::invalid(format!(
                "policy table for {} is {}x{}, task is {}x{}",
                task.id, shape.seq_len, shape.vocab, task.seq_len, task.vocab_size
            )));
        }
        Ok(shape)
    }
}

fn same_layout(a: &Arc<Layout>, b: &Arc<Layout>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

/// Numerically stable softmax of `logits / temperature`.
fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / temperature));
    let mut out: Vec<f64> = logits.iter().map(|&x| (x / temperature - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

fn log_softmax_at(logits: &[f64], temperature: f64, token: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / temperature));
    let lse = max + logits.iter().map(|&x| (x / temperature - max).exp()).sum::<f64>().ln();
    logits[token] / temperature - lse
}

/// A direction in parameter space, e.g. `∇ log π(y|x)`.
#[derive(Clone, Debug)]
pub struct Gradient {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl PartialEq for Gradient {
    fn eq(&self, other: &Self) -> bool {
        same_layout(&self.layout, &other.layout) && self.values == other.values
    }
}

impl Gradient {
    pub fn zeros(layout: &Arc<Layout>) -> Gradient {
        Gradient { layout: layout.clone(), values: vec![0.0; layout.total] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) -> Result<()> {
        if !same_layout(&self.layout, &other.layout) {
            return Err(Error::invalid("gradient shapes differ"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn dot(&self, other: &Gradient) -> Result<f64> {
        if !same_layout(&self.layout, &other.layout) {
            return Err(Error::invalid("gradient shapes differ"));
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }
}

#[derive(Clone, Debug)]
pub struct Policy {
    layout: Arc<Layout>,
    params: Vec<f64>,
    temperature: f64,
}

impl PartialEq for Policy {
    fn eq(&self, other: &Self) -> bool {
        same_layout(&self.layout, &other.layout)
            && self.temperature.to_bits() == other.temperature.to_bits()
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Policy {
    /// All logits zero.
    pub fn uniform(corpus: &Corpus) -> Result<Policy> {
        Ok(Policy::zeros(Layout::for_corpus(corpus)?))
    }

    pub fn zeros(layout: Arc<Layout>) -> Policy {
        let params = vec![0.0; layout.total];
        Policy { layout, params, temperature: 1.0 }
    }

    pub fn from_params(layout: Arc<Layout>, params: Vec<f64>, temperature: f64) -> Result<Policy> {
        if params.len() != layout.total {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive and finite"));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("policy parameters must be finite"));
        }
        Ok(Policy { layout, params, temperature })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Policy> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive and finite"));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Checks that this policy has a table of the right shape for every corpus task.
    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if self.layout.tables.len() != corpus.tasks.len() {
            return Err(Error::invalid(format!(
                "policy has {} task tables, corpus has {} tasks",
                self.layout.tables.len(),
                corpus.tasks.len()
            )));
        }
        corpus.tasks.iter().try_for_each(|t| self.layout.shape_for(t).map(|_| ()))
    }

    fn logits(&self, shape: &TableShape, position: usize, prev: Option<u32>) -> &[f64] {
        let start = shape.slice_start(position, prev);
        &self.params[start..start + shape.vocab]
    }

    /// Next-token distribution at `(position, prev)`.
    pub fn next_token_probs(&self, task: &Task, position: usize, prev: Option<u32>) -> Result<Vec<f64>> {
        let shape = self.layout.shape_for(task)?;
        if position >= shape.seq_len || prev.is_some_and(|p| p as usize >= shape.vocab) {
            return Err(Error::invalid("slice index out of range"));
        }
        Ok(softmax(self.logits(shape, position, prev), self.temperature))
    }

    pub fn log_prob(&self, task: &Task, tokens: &[u32]) -> Result<f64> {
        let shape = self.layout.shape_for(task)?;
        task.check_tokens(tokens)?;
        let mut prev = None;
        let mut total = 0.0;
        for (pos, &tok) in tokens.iter().enumerate() {
            total += log_softmax_at(self.logits(shape, pos, prev), self.temperature, tok as usize);
            prev = Some(tok);
        }
        Ok(total)
    }

    /// Adds `scale * ∇ log π(tokens)` into `acc`.
    pub fn accumulate_grad(&self, task: &Task, tokens: &[u32], scale: f64, acc: &mut Gradient) -> Result<()> {
        if !same_layout(&self.layout, &acc.layout) {
            return Err(Error::invalid("gradient accumulator shape differs from policy"));
        }
        let shape = self.layout.shape_for(task)?;
        task.check_tokens(tokens)?;
        if scale == 0.0 {
            return Ok(());
        }
        let inv_t = 1.0 / self.temperature;
        let mut prev = None;
        for (pos, &tok) in tokens.iter().enumerate() {
            let start = shape.slice_start(pos, prev);
            let probs = softmax(&self.params[start..start + shape.vocab], self.temperature);
            for (j, p) in probs.iter().enumerate() {
                let indicator = if j == tok as usize { 1.0 } else { 0.0 };
                acc.values[start + j] += scale * inv_t * (indicator - p);
            }
            prev = Some(tok);
        }
        Ok(())
    }

    /// `∇ log π(tokens)`: at each visited slice, `(1[chosen] − p) / temperature`;
    /// zero elsewhere.
    pub fn grad_log_prob(&self, task: &Task, tokens: &[u32]) -> Result<Gradient> {
        let mut g = Gradient::zeros(&self.layout);
        self.accumulate_grad(task, tokens, 1.0, &mut g)?;
        Ok(g)
    }

    /// Draws `n` sequences autoregressively; deterministic in `rng_seed`.
    pub fn sample(&self, task: &Task, n: usize, rng_seed: u64) -> Result<Vec<Vec<u32>>> {
        if n == 0 {
            return Err(Error::invalid("sample size must be >= 1"));
        }
        let shape = self.layout.shape_for(task)?;
        let mut rng = seed::rng(rng_seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut seq = Vec::with_capacity(shape.seq_len);
            let mut prev = None;
            for pos in 0..shape.seq_len {
                let probs = softmax(self.logits(shape, pos, prev), self.temperature);
                let dist = WeightedIndex::new(&probs)
                    .map_err(|e| Error::invalid(format!("degenerate next-token distribution: {e}")))?;
                let tok = dist.sample(&mut rng) as u32;
                seq.push(tok);
                prev = Some(tok);
            }
            out.push(seq);
        }
        Ok(out)
    }

    /// Returns `θ + eta * direction`; `self` is unchanged.
    pub fn apply_update(&self, direction: &Gradient, eta: f64) -> Result<Policy> {
        if !same_layout(&self.layout, &direction.layout) {
            return Err(Error::invalid("update direction shape differs from policy"));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::invalid("step size must be positive and finite"));
        }
        let mut next = self.clone();
        for (p, d) in next.params.iter_mut().zip(&direction.values) {
            // skipping zeros keeps zero-signal updates bit-exact (incl. -0.0)
            if *d != 0.0 {
                *p += eta * d;
            }
        }
        if next.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("update produced non-finite parameters"));
        }
        Ok(next)
    }

    /// Σ over the task's program table of π(y).
    pub fn table_mass(&self, task: &Task) -> Result<f64> {
        task.programs.iter().map(|c| self.log_prob(task, &c.tokens).map(f64::exp)).sum()
    }

    /// Probability that one sample passes every test (exact pass@1).
    pub fn full_pass_probability(&self, task: &Task) -> Result<f64> {
        task.programs
            .iter()
            .filter(|c| c.pass_bits.is_full_pass())
            .map(|c| self.log_prob(task, &c.tokens).map(f64::exp))
            .sum()
    }

    /// Per-test pass probability under this policy, over the program table.
    pub fn test_pass_probabilities(&self, task: &Task) -> Result<Vec<f64>> {
        let mut out = vec![0.0; task.test_count];
        for c in &task.programs {
            let p = self.log_prob(task, &c.tokens)?.exp();
            for (o, b) in out.iter_mut().zip(c.pass_bits.bits()) {
                if *b {
                    *o += p;
                }
            }
        }
        Ok(out)
    }

    // -----------------------------------------------------------------------
    // Snapshot format
    // -----------------------------------------------------------------------

    /// Text snapshot:
    ///
    /// ```text
    /// rlvr-lab-policy 1
    /// temperature <t>
    /// tables <n>
    /// table <task_id> <seq_len> <vocab>      (n lines)
    /// params <count>
    /// <vocab values per line, rows ordered by (table, position, prev)>
    /// ```
    pub fn to_snapshot(&self) -> Result<String> {
        let mut out = String::new();
        writeln!(out, "{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}").unwrap();
        writeln!(out, "temperature {}", self.temperature).unwrap();
        writeln!(out, "tables {}", self.layout.tables.len()).unwrap();
        for t in &self.layout.tables {
            if t.task_id.is_empty() || t.task_id.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("task id {:?} cannot be stored in a snapshot", t.task_id)));
            }
            writeln!(out, "table {} {} {}", t.task_id, t.seq_len, t.vocab).unwrap();
        }
        writeln!(out, "params {}", self.params.len()).unwrap();
        for t in &self.layout.tables {
            for row in self.params[t.offset..t.offset + t.len()].chunks(t.vocab) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        Ok(out)
    }

    pub fn from_snapshot(text: &str) -> Result<Policy> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .map(|(i, l)| (i + 1, l))
                .ok_or_else(|| Error::Format(format!("snapshot truncated before {what}")))
        };
        let bad = |line: usize, msg: &str| Error::Format(format!("snapshot line {line}: {msg}"));

        let (ln, magic) = next("header")?;
        if magic != format!("{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}") {
            return Err(bad(ln, "unsupported snapshot header"));
        }
        let (ln, temp) = next("temperature")?;
        let temperature: f64 = temp
            .strip_prefix("temperature ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(ln, "expected `temperature <real>`"))?;
        let (ln, tables) = next("table count")?;
        let n: usize = tables
            .strip_prefix("tables ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(ln, "expected `tables <n>`"))?;
        let mut dims = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, line) = next("table shape")?;
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["table", id, len, vocab] => {
                    let len = len.parse().map_err(|_| bad(ln, "bad seq_len"))?;
                    let vocab = vocab.parse().map_err(|_| bad(ln, "bad vocab"))?;
                    dims.push((id.to_string(), len, vocab));
                }
                _ => return Err(bad(ln, "expected `table <id> <seq_len> <vocab>`")),
            }
        }
        let layout = Layout::new(dims)?;
        let (ln, count) = next("parameter count")?;
        let count: usize = count
            .strip_prefix("params ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(ln, "expected `params <count>`"))?;
        if count != layout.total {
            return Err(bad(ln, "parameter count does not match table shapes"));
        }
        let mut params = Vec::with_capacity(count);
        while params.len() < count {
            let (ln, line) = next("parameters")?;
            for v in line.split(' ') {
                params.push(v.parse::<f64>().map_err(|_| bad(ln, "bad parameter value"))?);
            }
        }
        if params.len() != count || lines.next().is_some_and(|(_, l)| !l.is_empty()) {
            return Err(Error::Format("snapshot has trailing parameter data".into()));
        }
        Policy::from_params(layout, params, temperature)
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_snapshot()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_snapshot(path: &Path) -> Result<Policy> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Policy::from_snapshot(&text)
    }
}

pub const SNAPSHOT_MAGIC: &str = "rlvr-lab-policy";
pub const SNAPSHOT_VERSION: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_conflict_corpus, gen_easy_corpus};
    use rand::Rng;

    fn random_policy(corpus: &Corpus, seed: u64, scale: f64) -> Policy {
        let mut p = Policy::uniform(corpus).unwrap();
        let mut rng = seed::rng(seed);
        p.params_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
        p
    }

    #[test]
    fn uniform_log_prob() {
        let c = gen_easy_corpus(1, 3, 0).unwrap();
        let p = Policy::uniform(&c).unwrap();
        let lp = p.log_prob(&c.tasks[0], &[0, 1, 0]).unwrap();
        assert!((lp - (1.0f64 / 8.0).ln()).abs() < 1e-12);
        assert!((lp + 2.0794).abs() < 1e-4);
    }

    #[test]
    fn peaked_policy_log_prob_near_zero() {
        let c = gen_easy_corpus(1, 3, 0).unwrap();
        let t = &c.tasks[0];
        let mut p = Policy::uniform(&c).unwrap();
        let target = [1u32, 0, 1];
        let shape = p.layout.tables[0].clone();
        let mut prev = None;
        for (pos, &tok) in target.iter().enumerate() {
            let s = shape.slice_start(pos, prev);
            p.params[s + tok as usize] = 50.0;
            prev = Some(tok);
        }
        assert!(p.log_prob(t, &target).unwrap() > -1e-12);
        let samples = p.sample(t, 20, 4).unwrap();
        assert!(samples.iter().all(|s| s == &target));
    }

    #[test]
    fn log_prob_rejects_bad_sequences() {
        let c = gen_easy_corpus(1, 3, 0).unwrap();
        let p = Policy::uniform(&c).unwrap();
        assert!(matches!(p.log_prob(&c.tasks[0], &[0, 1]), Err(Error::InvalidArgument(_))));
        assert!(matches!(p.log_prob(&c.tasks[0], &[0, 1, 2]), Err(Error::InvalidArgument(_))));
        assert!(p.grad_log_prob(&c.tasks[0], &[0]).is_err());
        let other = gen_conflict_corpus(1, 8, 0.5, 0).unwrap();
        assert!(p.log_prob(&other.tasks[0], &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn one_step_gradient_by_hand() {
        // vocab 2, equal logits: chosen entry 0.5, other -0.5 at the begin slice
        let layout = Layout::new([("t".to_string(), 1, 2)]).unwrap();
        let p = Policy::zeros(layout);
        let task = Task {
            id: "t".into(),
            test_count: 1,
            vocab_size: 2,
            seq_len: 1,
            programs: vec![],
            reference_ids: vec![],
        };
        let g = p.grad_log_prob(&task, &[1]).unwrap();
        let begin = p.layout.tables[0].slice_start(0, None);
        assert_eq!(g.values()[begin], -0.5);
        assert_eq!(g.values()[begin + 1], 0.5);
        assert_eq!(g.values().iter().filter(|v| **v != 0.0).count(), 2);
    }

    #[test]
    fn gradient_slices_sum_to_zero() {
        let c = gen_conflict_corpus(2, 8, 0.5, 1).unwrap();
        let p = random_policy(&c, 3, 2.0);
        let t = &c.tasks[1];
        let g = p.grad_log_prob(t, &t.programs[17].tokens).unwrap();
        for row in g.values().chunks(t.vocab_size) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
        // the first task's table is untouched
        let first = &p.layout.tables[0];
        assert!(g.values()[first.offset..first.offset + first.len()].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn full_table_mass_is_one() {
        let c = gen_conflict_corpus(2, 8, 0.5, 1).unwrap();
        let p = random_policy(&c, 5, 3.0);
        for t in &c.tasks {
            assert!((p.table_mass(t).unwrap() - 1.0).abs() < 1e-9);
        }
        let tempered = p.clone().with_temperature(0.7).unwrap();
        assert!((tempered.table_mass(&c.tasks[0]).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn partial_table_mass_at_most_one() {
        let mut c = gen_easy_corpus(1, 3, 0).unwrap();
        c.tasks[0].programs.truncate(6);
        let p = random_policy(&c, 2, 1.0);
        assert!(p.table_mass(&c.tasks[0]).unwrap() < 1.0);
    }

    #[test]
    fn sampling_is_deterministic() {
        let c = gen_conflict_corpus(1, 8, 0.5, 1).unwrap();
        let p = random_policy(&c, 5, 1.0);
        assert_eq!(p.sample(&c.tasks[0], 32, 9).unwrap(), p.sample(&c.tasks[0], 32, 9).unwrap());
        assert!(p.sample(&c.tasks[0], 0, 9).is_err());
    }

    #[test]
    fn apply_update_semantics() {
        let c = gen_conflict_corpus(1, 8, 0.5, 1).unwrap();
        let p = random_policy(&c, 5, 1.0);
        let zero = Gradient::zeros(p.layout());
        assert_eq!(p.apply_update(&zero, 0.3).unwrap(), p);
        assert!(p.apply_update(&zero, 0.0).is_err());
        assert!(p.apply_update(&zero, -1.0).is_err());

        let other = Policy::uniform(&gen_easy_corpus(1, 3, 0).unwrap()).unwrap();
        assert!(p.apply_update(&Gradient::zeros(other.layout()), 0.1).is_err());

        let t = &c.tasks[0];
        let y = &t.programs[5].tokens;
        let g = p.grad_log_prob(t, y).unwrap();
        let before = p.log_prob(t, y).unwrap();
        let snapshot = p.clone();
        let q = p.apply_update(&g, 1e-3).unwrap();
        assert_eq!(p, snapshot);
        assert!(q.log_prob(t, y).unwrap() > before);
    }

    #[test]
    fn snapshot_round_trip() {
        let c = gen_conflict_corpus(3, 8, 0.5, 1).unwrap();
        let p = random_policy(&c, 8, 5.0).with_temperature(0.9).unwrap();
        let text = p.to_snapshot().unwrap();
        assert!(text.starts_with("rlvr-lab-policy 1\n"));
        assert_eq!(Policy::from_snapshot(&text).unwrap(), p);
        assert!(Policy::from_snapshot("rlvr-lab-policy 2\n").is_err());
        let truncated: String = text.lines().take(8).collect::<Vec<_>>().join("\n");
        assert!(Policy::from_snapshot(&truncated).is_err());
    }
}
