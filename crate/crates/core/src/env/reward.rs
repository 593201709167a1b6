//! Outcome-level reward models.
//!
//! Rewards are deterministic per (context, trajectory) and normalized to
//! [0, 1]. Three kinds cover the lab's needs: explicit tables, target-pattern
//! matching, and weighted composites over context subsets (the synthetic
//! stand-in for conflicting reward signals).

use crate::env::base::{EnvError, Trajectory};
use serde::{Deserialize, Serialize};

/// One table entry: reward for an exact (context, token sequence) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableEntry {
    pub context: usize,
    pub tokens: Vec<usize>,
    pub reward: f64,
}

/// Explicit reward lookup with a default for unlisted trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableReward {
    #[serde(default)]
    pub default: f64,
    #[serde(default)]
    pub entries: Vec<TableEntry>,
}

/// Per-context target sequence for pattern-match scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetEntry {
    pub context: usize,
    pub tokens: Vec<usize>,
}

/// Positional-match reward: the fraction of aligned positions (over the
/// longer of trajectory and target) whose tokens agree. Exact matches score
/// 1, disjoint sequences 0; contexts without a target score 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetMatchReward {
    pub targets: Vec<TargetEntry>,
}

/// One side of a composite: a child model applied on a context subset with a
/// positive mixture weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositePart {
    pub model: Box<RewardModel>,
    pub contexts: Vec<usize>,
    pub weight: f64,
}

/// Weighted mix of two reward models over (possibly overlapping) context
/// subsets. Where both apply, the value is the weight-normalized average;
/// where neither applies, the reward is 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeReward {
    pub first: CompositePart,
    pub second: CompositePart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardModel {
    Table(TableReward),
    TargetMatch(TargetMatchReward),
    Composite(CompositeReward),
}

impl RewardModel {
    /// Constant reward c on every (context, trajectory).
    pub fn constant(value: f64) -> Self {
        RewardModel::Table(TableReward {
            default: value,
            entries: Vec::new(),
        })
    }

    pub fn table(default: f64, entries: Vec<TableEntry>) -> Self {
        RewardModel::Table(TableReward { default, entries })
    }

    pub fn target_match(targets: Vec<TargetEntry>) -> Self {
        RewardModel::TargetMatch(TargetMatchReward { targets })
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        fn check_unit(value: f64, what: &str) -> Result<(), EnvError> {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(EnvError::InvalidReward(format!(
                    "{what} value {value} outside [0, 1]"
                )));
            }
            Ok(())
        }
        match self {
            RewardModel::Table(t) => {
                check_unit(t.default, "table default")?;
                for e in &t.entries {
                    check_unit(e.reward, "table entry")?;
                }
                Ok(())
            }
            RewardModel::TargetMatch(_) => Ok(()),
            RewardModel::Composite(c) => {
                for part in [&c.first, &c.second] {
                    if !(part.weight.is_finite() && part.weight > 0.0) {
                        return Err(EnvError::InvalidReward(format!(
                            "composite weight {} must be positive",
                            part.weight
                        )));
                    }
                    part.model.validate()?;
                }
                Ok(())
            }
        }
    }

    /// Deterministic reward in [0, 1] for a trajectory.
    pub fn evaluate(&self, trajectory: &Trajectory) -> f64 {
        match self {
            RewardModel::Table(t) => t
                .entries
                .iter()
                .find(|e| e.context == trajectory.context && e.tokens == trajectory.tokens)
                .map_or(t.default, |e| e.reward),
            RewardModel::TargetMatch(m) => m
                .targets
                .iter()
                .find(|t| t.context == trajectory.context)
                .map_or(0.0, |t| match_fraction(&trajectory.tokens, &t.tokens)),
            RewardModel::Composite(c) => {
                let mut weight_sum = 0.0;
                let mut value_sum = 0.0;
                for part in [&c.first, &c.second] {
                    if part.contexts.contains(&trajectory.context) {
                        weight_sum += part.weight;
                        value_sum += part.weight * part.model.evaluate(trajectory);
                    }
                }
                if weight_sum > 0.0 {
                    value_sum / weight_sum
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fraction of agreeing positions over the longer length; positions past the
/// shorter sequence count as mismatches.
fn match_fraction(tokens: &[usize], target: &[usize]) -> f64 {
    let longest = tokens.len().max(target.len());
    if longest == 0 {
        return 0.0;
    }
    let agree = tokens
        .iter()
        .zip(target.iter())
        .filter(|(a, b)| a == b)
        .count();
    agree as f64 / longest as f64
}
