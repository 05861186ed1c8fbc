//! Reward designs over per-test pass vectors, and heuristic test-case
//! difficulty labeling used by the reweighted reward.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{pass_rate, Corpus, PassVector, Task};
use crate::error::{Error, Result};
use crate::policy::Policy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Binary,
    PassRate,
    Reweighted,
    TwoStage,
}

impl RewardKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardKind::Binary => "binary",
            RewardKind::PassRate => "pass_rate",
            RewardKind::Reweighted => "reweighted",
            RewardKind::TwoStage => "two_stage",
        }
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

/// EASY=1, MEDIUM=2, HARD=3.
pub fn default_weight_map() -> BTreeMap<Difficulty, f64> {
    BTreeMap::from([(Difficulty::Easy, 1.0), (Difficulty::Medium, 2.0), (Difficulty::Hard, 3.0)])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub kind: RewardKind,
    #[serde(default)]
    pub switch_step: usize,
    #[serde(default = "default_weight_map")]
    pub weight_map: BTreeMap<Difficulty, f64>,
}

impl RewardSpec {
    pub fn new(kind: RewardKind) -> Self {
        RewardSpec { kind, switch_step: 0, weight_map: default_weight_map() }
    }

    pub fn two_stage(switch_step: usize) -> Self {
        RewardSpec { switch_step, ..RewardSpec::new(RewardKind::TwoStage) }
    }

    pub fn validate(&self) -> Result<()> {
        for d in [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard] {
            match self.weight_map.get(&d) {
                Some(w) if *w > 0.0 && w.is_finite() => {}
                Some(_) => return Err(Error::invalid(format!("weight for {d:?} must be positive"))),
                None => return Err(Error::invalid(format!("weight_map is missing {d:?}"))),
            }
        }
        Ok(())
    }

    /// Per-test weights for a list of difficulty labels.
    pub fn weights_for(&self, labels: &[Difficulty]) -> Result<Vec<f64>> {
        self.validate()?;
        Ok(labels.iter().map(|d| self.weight_map[d]).collect())
    }
}

/// 1 iff every test passes.
pub fn binary_reward(pv: &PassVector) -> Result<f64> {
    if pv.is_empty() {
        return Err(Error::invalid("pass vector is empty"));
    }
    Ok(if pv.is_full_pass() { 1.0 } else { 0.0 })
}

pub fn pass_rate_reward(pv: &PassVector) -> Result<f64> {
    pass_rate(pv)
}

/// `Σ w_k s_k / Σ w_k`.
pub fn reweighted_reward(pv: &PassVector, weights: &[f64]) -> Result<f64> {
    if pv.is_empty() {
        return Err(Error::invalid("pass vector is empty"));
    }
    if weights.len() != pv.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} tests",
            weights.len(),
            pv.len()
        )));
    }
    if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::invalid("test weights must be positive"));
    }
    // scale by the max weight so equal weights become exactly 1.0 and the
    // ratio reduces to count/K bit-for-bit
    let max = weights.iter().copied().fold(0.0, f64::max);
    let total: f64 = weights.iter().map(|w| w / max).sum();
    let passed: f64 = pv.bits().iter().zip(weights).filter(|(b, _)| **b).map(|(_, w)| w / max).sum();
    Ok(passed / total)
}

pub fn reward_for_step(spec: &RewardSpec, step: usize, pv: &PassVector, weights: Option<&[f64]>) -> Result<f64> {
    match (spec.kind, weights) {
        (RewardKind::Reweighted, Some(w)) => reweighted_reward(pv, w),
        (RewardKind::Reweighted, None) => Err(Error::invalid("reweighted reward needs per-test weights")),
        (_, Some(_)) => Err(Error::invalid(format!("{} reward takes no per-test weights", spec.kind))),
        (RewardKind::Binary, None) => binary_reward(pv),
        (RewardKind::PassRate, None) => pass_rate_reward(pv),
        (RewardKind::TwoStage, None) if step < spec.switch_step => pass_rate_reward(pv),
        (RewardKind::TwoStage, None) => binary_reward(pv),
    }
}

/// Inputs to difficulty labeling for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct DifficultyInput {
    /// `rates[i][j]`: pass rate of model tier `i` on test `j`.
    pub rates: Vec<Vec<f64>>,
    pub model_weights: Vec<f64>,
    pub epsilon: f64,
}

pub const MODEL_TIERS: usize = 3;
pub const DEFAULT_DIFFICULTY_EPSILON: f64 = 0.1;

impl DifficultyInput {
    fn validate(&self) -> Result<usize> {
        if self.rates.len() != MODEL_TIERS || self.model_weights.len() != MODEL_TIERS {
            return Err(Error::invalid("difficulty labeling needs exactly three model tiers"));
        }
        let n = self.rates[0].len();
        if n == 0 {
            return Err(Error::invalid("difficulty labeling needs at least one test case"));
        }
        if self.rates.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("model tiers report different test counts"));
        }
        if self.rates.iter().flatten().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::invalid("pass rates must lie in [0,1]"));
        }
        if self.model_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("model weights must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::invalid("epsilon must lie in (0, 0.5)"));
        }
        Ok(n)
    }

    /// Weighted pass signal `p[j] = Σ_i w_i r_i[j] / Σ_i w_i`.
    pub fn pass_signal(&self) -> Result<Vec<f64>> {
        let n = self.validate()?;
        let wsum: f64 = self.model_weights.iter().sum();
        Ok((0..n)
            .map(|j| {
                self.model_weights
                    .iter()
                    .zip(&self.rates)
                    .map(|(w, r)| w * r[j])
                    .sum::<f64>()
                    / wsum
            })
            .collect())
    }
}

/// Percentile of sorted values with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Labels tests from a pass signal: all EASY if every `p >= 1-ε`, all HARD if
/// every `p <= ε`, otherwise `p >= q67` → EASY, `p < q33` → HARD, else MEDIUM.
pub fn label_from_signal(p: &[f64], epsilon: f64) -> Result<Vec<Difficulty>> {
    if p.is_empty() {
        return Err(Error::invalid("difficulty labeling needs at least one test case"));
    }
    if p.iter().all(|&v| v >= 1.0 - epsilon) {
        return Ok(vec![Difficulty::Easy; p.len()]);
    }
    if p.iter().all(|&v| v <= epsilon) {
        return Ok(vec![Difficulty::Hard; p.len()]);
    }
    let mut vals = p.to_vec();
    vals.sort_by(f64::total_cmp);
    let q33 = percentile(&vals, 33.0);
    let q67 = percentile(&vals, 67.0);
    Ok(p.iter()
        .map(|&v| {
            if v >= q67 {
                Difficulty::Easy
            } else if v < q33 {
                Difficulty::Hard
            } else {
                Difficulty::Medium
            }
        })
        .collect())
}

pub fn label_difficulty(d: &DifficultyInput) -> Result<Vec<Difficulty>> {
    let p = d.pass_signal()?;
    label_from_signal(&p, d.epsilon)
}

/// Model weights for three frozen tiers: each tier's mean exact pass@1 over a
/// calibration corpus.
pub fn calibrate_tier_weights(corpus: &Corpus, tiers: &[Policy]) -> Result<Vec<f64>> {
    if tiers.len() != MODEL_TIERS {
        return Err(Error::invalid("expected three model tiers"));
    }
    if corpus.tasks.is_empty() {
        return Err(Error::invalid("calibration corpus is empty"));
    }
    tiers
        .iter()
        .map(|p| {
            let total: f64 = corpus
                .tasks
                .iter()
                .map(|t| p.full_pass_probability(t))
                .sum::<Result<f64>>()?;
            let w = total / corpus.tasks.len() as f64;
            if w > 0.0 {
                Ok(w)
            } else {
                Err(Error::invalid("a model tier has zero pass@1 on the calibration corpus"))
            }
        })
        .collect()
}

/// Difficulty input for one task from the tiers' exact per-test pass probabilities.
pub fn tier_difficulty_input(task: &Task, tiers: &[Policy], model_weights: &[f64], epsilon: f64) -> Result<DifficultyInput> {
    let rates = tiers
        .iter()
        .map(|p| {
            p.test_pass_probabilities(task)
                .map(|v| v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(DifficultyInput { rates, model_weights: model_weights.to_vec(), epsilon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(s: &str) -> PassVector {
        PassVector::parse(s).unwrap()
    }

    fn signal_input(p: &[f64]) -> DifficultyInput {
        // identical tiers make the weighted signal equal p
        DifficultyInput {
            rates: vec![p.to_vec(); 3],
            model_weights: vec![0.5, 0.3, 0.2],
            epsilon: DEFAULT_DIFFICULTY_EPSILON,
        }
    }

    #[test]
    fn binary_examples() {
        assert_eq!(binary_reward(&pv("111111")).unwrap(), 1.0);
        assert_eq!(binary_reward(&pv("111110")).unwrap(), 0.0);
        assert_eq!(binary_reward(&pv("000000")).unwrap(), 0.0);
        assert!(binary_reward(&pv("")).is_err());
    }

    #[test]
    fn pass_rate_examples() {
        assert_eq!(pass_rate_reward(&pv("1101")).unwrap(), 0.75);
        assert_eq!(pass_rate_reward(&pv("1111")).unwrap(), 1.0);
        assert_eq!(pass_rate_reward(&pv("10")).unwrap(), 0.5);
    }

    #[test]
    fn reweighted_examples() {
        assert_eq!(reweighted_reward(&pv("110"), &[1.0, 2.0, 3.0]).unwrap(), 0.5);
        assert_eq!(reweighted_reward(&pv("111"), &[0.1, 7.0, 3.0]).unwrap(), 1.0);
        assert!(reweighted_reward(&pv("110"), &[1.0, 2.0]).is_err());
        assert!(reweighted_reward(&pv("110"), &[1.0, 0.0, 1.0]).is_err());
        assert!(reweighted_reward(&pv("110"), &[1.0, -1.0, 1.0]).is_err());
    }

    #[test]
    fn difficulty_shortcuts_and_percentiles() {
        use Difficulty::*;
        assert_eq!(label_difficulty(&signal_input(&[0.95, 0.92, 0.99])).unwrap(), vec![Easy; 3]);
        assert_eq!(label_difficulty(&signal_input(&[0.02, 0.08, 0.0])).unwrap(), vec![Hard; 3]);
        assert_eq!(label_difficulty(&signal_input(&[0.2, 0.5, 0.8])).unwrap(), vec![Hard, Medium, Easy]);
        let sorted = [0.2, 0.5, 0.8];
        assert!((percentile(&sorted, 33.0) - 0.398).abs() < 1e-12);
        assert!((percentile(&sorted, 67.0) - 0.602).abs() < 1e-12);
    }

    #[test]
    fn difficulty_ties_follow_comparisons() {
        use Difficulty::*;
        // all equal mid values: q33 = q67 = v, so v >= q67 labels EASY
        assert_eq!(label_from_signal(&[0.5, 0.5, 0.5], 0.1).unwrap(), vec![Easy; 3]);
        // 4 values: q33 = 0.3 + 0.99*0.1 = 0.399, q67 = 0.6 + 0.01*0.3 = 0.603
        assert_eq!(label_from_signal(&[0.3, 0.4, 0.6, 0.9], 0.1).unwrap(), vec![Hard, Medium, Medium, Easy]);
        // a value exactly at q33 is MEDIUM, exactly at q67 is EASY
        assert_eq!(label_from_signal(&[0.2, 0.2, 0.8, 0.8], 0.1).unwrap(), vec![Medium, Medium, Easy, Easy]);
    }

    #[test]
    fn difficulty_signal_weights_models() {
        let d = DifficultyInput {
            rates: vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]],
            model_weights: vec![2.0, 1.0, 1.0],
            epsilon: 0.1,
        };
        assert_eq!(d.pass_signal().unwrap(), vec![0.5, 0.25]);
    }

    #[test]
    fn difficulty_input_validation() {
        let mut d = signal_input(&[0.2, 0.5]);
        d.rates.pop();
        assert!(label_difficulty(&d).is_err());
        assert!(label_difficulty(&signal_input(&[])).is_err());
        assert!(label_difficulty(&signal_input(&[1.2])).is_err());
        let mut d = signal_input(&[0.2]);
        d.epsilon = 0.5;
        assert!(label_difficulty(&d).is_err());
        let mut d = signal_input(&[0.2]);
        d.model_weights[1] = 0.0;
        assert!(label_difficulty(&d).is_err());
    }

    #[test]
    fn step_dispatch() {
        let spec = RewardSpec::two_stage(256);
        assert_eq!(reward_for_step(&spec, 255, &pv("1101"), None).unwrap(), 0.75);
        assert_eq!(reward_for_step(&spec, 256, &pv("1101"), None).unwrap(), 0.0);
        let bin = RewardSpec::new(RewardKind::Binary);
        assert_eq!(reward_for_step(&bin, 12345, &pv("1111"), None).unwrap(), 1.0);
        let rw = RewardSpec::new(RewardKind::Reweighted);
        assert!(reward_for_step(&rw, 0, &pv("1101"), None).is_err());
        assert_eq!(reward_for_step(&rw, 0, &pv("110"), Some(&[1.0, 2.0, 3.0])).unwrap(), 0.5);
        assert!(reward_for_step(&bin, 0, &pv("110"), Some(&[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn spec_weight_map() {
        let spec = RewardSpec::new(RewardKind::Reweighted);
        use Difficulty::*;
        assert_eq!(spec.weights_for(&[Easy, Hard, Medium]).unwrap(), vec![1.0, 3.0, 2.0]);
        let mut bad = spec.clone();
        bad.weight_map.insert(Hard, 0.0);
        assert!(bad.validate().is_err());
        bad.weight_map.remove(&Hard);
        assert!(bad.validate().is_err());
    }

    fn arb_bits() -> impl Strategy<Value = Vec<bool>> {
        prop::collection::vec(any::<bool>(), 1..40)
    }

    proptest! {
        #[test]
        fn uniform_weights_equal_pass_rate(bits in arb_bits(), w in 0.01f64..100.0) {
            let pv = PassVector::new(bits);
            let weights = vec![w; pv.len()];
            prop_assert_eq!(reweighted_reward(&pv, &weights).unwrap(), pass_rate_reward(&pv).unwrap());
        }

        #[test]
        fn binary_iff_full_pass_rate(bits in arb_bits()) {
            let pv = PassVector::new(bits);
            let bin = binary_reward(&pv).unwrap();
            let rate = pass_rate_reward(&pv).unwrap();
            prop_assert_eq!(bin == 1.0, rate == 1.0);
            prop_assert!(bin <= rate);
            prop_assert!((0.0..=1.0).contains(&rate));
        }

        #[test]
        fn flipping_a_bit_on_never_decreases_reward(
            bits in arb_bits(),
            idx in any::<prop::sample::Index>(),
            seed_w in prop::collection::vec(0.1f64..5.0, 40),
            step in 0usize..10,
        ) {
            let i = idx.index(bits.len());
            let mut up = bits.clone();
            up[i] = true;
            let (lo, hi) = (PassVector::new(bits), PassVector::new(up));
            let w = &seed_w[..lo.len()];
            for kind in [RewardKind::Binary, RewardKind::PassRate, RewardKind::TwoStage] {
                let spec = RewardSpec { switch_step: 5, ..RewardSpec::new(kind) };
                prop_assert!(reward_for_step(&spec, step, &hi, None).unwrap() >= reward_for_step(&spec, step, &lo, None).unwrap());
            }
            prop_assert!(reweighted_reward(&hi, w).unwrap() >= reweighted_reward(&lo, w).unwrap());
        }

        #[test]
        fn labeling_is_permutation_equivariant(
            p in prop::collection::vec(0.0f64..1.0, 1..12),
            perm_seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..p.len()).collect();
            perm.shuffle(&mut crate::seed::rng(perm_seed));
            let permuted: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
            let a = label_from_signal(&p, 0.1).unwrap();
            let b = label_from_signal(&permuted, 0.1).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(b[k], a[i]);
            }
        }
    }
}
