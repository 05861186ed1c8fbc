//! pass@k, reward-density reports and task-level solvability overlap.

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use serde::Serialize;

use crate::error::{Error, Result};

/// Largest `n` handled in exact integer arithmetic; C(64, 32) fits easily in u128.
pub const EXACT_PASS_AT_K_LIMIT: u64 = 64;

fn check_pass_at_k(n: u64, c: u64, k: u64) -> Result<()> {
    if k < 1 || k > n {
        return Err(Error::invalid(format!("pass@k needs 1 <= k <= n (n={n}, k={k})")));
    }
    if c > n {
        return Err(Error::invalid(format!("pass@k needs c <= n (n={n}, c={c})")));
    }
    Ok(())
}

/// Exact binomial coefficient; every intermediate value is itself a binomial
/// coefficient times at most `n`, so it cannot overflow for `n <= 64`.
fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * u128::from(n - i) / u128::from(i + 1);
    }
    acc
}

/// pass@k as a reduced fraction, for `n <= 64`.
pub fn pass_at_k_exact(n: u64, c: u64, k: u64) -> Result<Ratio<u128>> {
    check_pass_at_k(n, c, k)?;
    if n > EXACT_PASS_AT_K_LIMIT {
        return Err(Error::invalid(format!("exact pass@k is limited to n <= {EXACT_PASS_AT_K_LIMIT}")));
    }
    let total = binomial(n, k);
    Ok(Ratio::new(total - binomial(n - c, k), total))
}

/// Unbiased pass@k: `1 − C(n−c, k) / C(n, k)`.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64> {
    check_pass_at_k(n, c, k)?;
    if n - c < k {
        return Ok(1.0);
    }
    if n <= EXACT_PASS_AT_K_LIMIT {
        let r = pass_at_k_exact(n, c, k)?;
        return Ok(*r.numer() as f64 / *r.denom() as f64);
    }
    // C(n−c,k)/C(n,k) = Π_{i<k} (n−c−i)/(n−i)
    let log_fail: f64 = (0..k).map(|i| ((n - c - i) as f64 / (n - i) as f64).ln()).sum();
    Ok((-log_fail.exp_m1()).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityReport {
    pub total_groups: usize,
    pub effective_groups: usize,
    /// Number of effective groups keyed by their count of distinct rewards.
    pub distinct_counts: BTreeMap<usize, usize>,
    /// Share of rewards in effective groups lying strictly inside (0, 1).
    pub intermediate_fraction: f64,
}

impl DensityReport {
    /// Effective groups with at least `m` distinct reward values.
    pub fn groups_with_at_least(&self, m: usize) -> usize {
        self.distinct_counts.range(m..).map(|(_, n)| n).sum()
    }
}

fn distinct_values(rewards: &[f64]) -> usize {
    let mut v = rewards.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

pub fn density_report(groups: &[Vec<f64>]) -> Result<DensityReport> {
    if groups.is_empty() {
        return Err(Error::invalid("density report needs at least one group"));
    }
    let mut distinct_counts = BTreeMap::new();
    let (mut effective, mut samples, mut inner) = (0usize, 0usize, 0usize);
    for g in groups {
        if g.is_empty() {
            return Err(Error::invalid("density report got an empty group"));
        }
        if g.iter().any(|r| !r.is_finite()) {
            return Err(Error::invalid("rewards must be finite"));
        }
        let d = distinct_values(g);
        if d < 2 {
            continue;
        }
        effective += 1;
        *distinct_counts.entry(d).or_insert(0) += 1;
        samples += g.len();
        inner += g.iter().filter(|r| **r > 0.0 && **r < 1.0).count();
    }
    Ok(DensityReport {
        total_groups: groups.len(),
        effective_groups: effective,
        distinct_counts,
        intermediate_fraction: if samples == 0 { 0.0 } else { inner as f64 / samples as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct OverlapMatrix {
    pub both_solved: usize,
    pub a_only: usize,
    pub b_only: usize,
    pub both_failed: usize,
}

impl OverlapMatrix {
    pub fn total(&self) -> usize {
        self.both_solved + self.a_only + self.b_only + self.both_failed
    }

    pub fn agreement(&self) -> f64 {
        match self.total() {
            0 => 1.0,
            t => (self.both_solved + self.both_failed) as f64 / t as f64,
        }
    }

    pub fn transposed(&self) -> OverlapMatrix {
        OverlapMatrix { a_only: self.b_only, b_only: self.a_only, ..self.clone() }
    }
}

pub fn solvability_overlap<S: AsRef<str>>(a: &[S], b: &[S], universe: &[S]) -> Result<OverlapMatrix> {
    let all: BTreeSet<&str> = universe.iter().map(AsRef::as_ref).collect();
    let set = |xs: &[S], name: &str| -> Result<BTreeSet<String>> {
        xs.iter()
            .map(|x| {
                let x = x.as_ref();
                if all.contains(x) {
                    Ok(x.to_string())
                } else {
                    Err(Error::invalid(format!("solved set {name} names unknown task {x:?}")))
                }
            })
            .collect()
    };
    let (sa, sb) = (set(a, "A")?, set(b, "B")?);
    let mut m = OverlapMatrix { both_solved: 0, a_only: 0, b_only: 0, both_failed: 0 };
    for t in &all {
        match (sa.contains(*t), sb.contains(*t)) {
            (true, true) => m.both_solved += 1,
            (true, false) => m.a_only += 1,
            (false, true) => m.b_only += 1,
            (false, false) => m.both_failed += 1,
        }
    }
    Ok(m)
}
