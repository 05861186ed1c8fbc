//! Group advantages for critic-free policy gradient.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Grpo,
    Rloo,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Grpo => "grpo",
            Method::Rloo => "rloo",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Standard deviation convention for GRPO normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdConvention {
    /// Divide by N.
    #[default]
    Population,
    /// Divide by N-1.
    Sample,
}

pub const DEFAULT_EPSILON: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageGroup {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub method: Method,
    pub epsilon: f64,
}

impl AdvantageGroup {
    /// At least two distinct rewards.
    pub fn is_effective(&self) -> bool {
        !all_equal(&self.rewards)
    }
}

fn all_equal(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

fn check(rewards: &[f64]) -> Result<()> {
    if rewards.len() < 2 {
        return Err(Error::invalid("a group needs at least two rewards"));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::invalid("rewards must be finite"));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `A_i = (r_i − μ) / (σ + ε)` with population σ.
pub fn grpo_advantages(rewards: &[f64], epsilon: f64) -> Result<AdvantageGroup> {
    grpo_advantages_with(rewards, epsilon, StdConvention::Population)
}

pub fn grpo_advantages_with(rewards: &[f64], epsilon: f64, std: StdConvention) -> Result<AdvantageGroup> {
    check(rewards)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let n = rewards.len() as f64;
    let mu = mean(rewards);
    let ss: f64 = rewards.iter().map(|r| (r - mu).powi(2)).sum();
    let sigma = match std {
        StdConvention::Population => (ss / n).sqrt(),
        StdConvention::Sample => (ss / (n - 1.0)).sqrt(),
    };
    // the rounded mean of equal values need not equal them; force exact zeros
    let advantages = if all_equal(rewards) {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mu) / (sigma + epsilon)).collect()
    };
    Ok(AdvantageGroup {
        rewards: rewards.to_vec(),
        advantages,
        mean: mu,
        std: if all_equal(rewards) { 0.0 } else { sigma },
        method: Method::Grpo,
        epsilon,
    })
}

/// `A_i = r_i − mean_{j≠i} r_j`.
pub fn rloo_advantages(rewards: &[f64]) -> Result<AdvantageGroup> {
    check(rewards)?;
    let n = rewards.len() as f64;
    let total: f64 = rewards.iter().sum();
    let mu = total / n;
    let ss: f64 = rewards.iter().map(|r| (r - mu).powi(2)).sum();
    let advantages = if all_equal(rewards) {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| r - (total - r) / (n - 1.0)).collect()
    };
    Ok(AdvantageGroup {
        rewards: rewards.to_vec(),
        advantages,
        mean: mu,
        std: if all_equal(rewards) { 0.0 } else { (ss / n).sqrt() },
        method: Method::Rloo,
        epsilon: DEFAULT_EPSILON,
    })
}

pub fn advantages(method: Method, rewards: &[f64], epsilon: f64, std: StdConvention) -> Result<AdvantageGroup> {
    match method {
        Method::Grpo => grpo_advantages_with(rewards, epsilon, std),
        Method::Rloo => rloo_advantages(rewards),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn grpo_single_success() {
        let g = grpo_advantages(&[1.0, 0.0, 0.0, 0.0], 1e-4).unwrap();
        assert_eq!(g.mean, 0.25);
        assert!((g.std - 0.4330127).abs() < 1e-6);
        assert!(close(&g.advantages, &[1.7317, -0.5772, -0.5772, -0.5772], 1e-4));
    }

    #[test]
    fn grpo_pass_rate_group() {
        let g = grpo_advantages(&[0.5, 0.25, 0.75, 0.5], 1e-4).unwrap();
        assert!((g.std - 0.1767767).abs() < 1e-6);
        assert!(close(&g.advantages, &[0.0, -1.4139, 1.4139, 0.0], 1e-3));
        assert!((g.advantages[2] - 0.25 / (0.125f64.sqrt() / 2.0 + 1e-4)).abs() < 1e-12);
    }

    #[test]
    fn rloo_examples() {
        let g = rloo_advantages(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(close(&g.advantages, &[1.0, -1.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0], 1e-15));
        let g = rloo_advantages(&[0.5, 0.25, 0.75, 0.5]).unwrap();
        assert!(close(&g.advantages, &[0.0, -1.0 / 3.0, 1.0 / 3.0, 0.0], 1e-15));
    }

    #[test]
    fn constant_groups_are_exactly_zero() {
        for c in [0.0, 0.84, 1.0, 0.1 + 0.2] {
            let r = vec![c; 16];
            assert!(grpo_advantages(&r, 1e-4).unwrap().advantages.iter().all(|a| *a == 0.0));
            assert!(rloo_advantages(&r).unwrap().advantages.iter().all(|a| *a == 0.0));
            assert!(!grpo_advantages(&r, 1e-4).unwrap().is_effective());
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(grpo_advantages(&[1.0], 1e-4).is_err());
        assert!(rloo_advantages(&[]).is_err());
        assert!(grpo_advantages(&[1.0, 0.0], 0.0).is_err());
        assert!(rloo_advantages(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn sample_std_convention() {
        let g = grpo_advantages_with(&[1.0, 0.0], 1e-4, StdConvention::Sample).unwrap();
        assert!((g.std - 0.5f64.sqrt()).abs() < 1e-15);
    }

    fn groups() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 2..32)
    }

    proptest! {
        #[test]
        fn order_preserving(r in groups()) {
            for g in [grpo_advantages(&r, 1e-4).unwrap(), rloo_advantages(&r).unwrap()] {
                for i in 0..r.len() {
                    for j in 0..r.len() {
                        if r[i] > r[j] {
                            prop_assert!(g.advantages[i] > g.advantages[j]);
                        }
                    }
                }
            }
        }

        #[test]
        fn grpo_affine_robustness(r in groups()) {
            let g = grpo_advantages(&r, 1e-4).unwrap();
            prop_assume!(g.std >= 0.1);
            let shifted: Vec<f64> = r.iter().map(|x| 2.0 * x + 3.0).collect();
            let h = grpo_advantages(&shifted, 1e-4).unwrap();
            prop_assert!(close(&g.advantages, &h.advantages, 1e-2));
        }

        #[test]
        fn binary_without_success_is_null(n in 2usize..32) {
            let r = vec![0.0; n];
            prop_assert!(grpo_advantages(&r, 1e-4).unwrap().advantages.iter().all(|a| *a == 0.0));
            prop_assert!(rloo_advantages(&r).unwrap().advantages.iter().all(|a| *a == 0.0));
        }
    }
}
