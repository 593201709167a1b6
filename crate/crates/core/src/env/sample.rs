//! Sampled groups: the unit both objectives consume.

use crate::env::base::{EnvError, Trajectory};
use crate::env::policy::TabularPolicy;
use crate::env::reward::RewardModel;
use crate::rng::Stream;
use crate::util::pairwise_sum;

/// G trajectories sampled for one context, with rewards and centered
/// advantages (`A_i = r_i - mean(r)`; advantages sum to zero).
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    context: usize,
    trajectories: Vec<Trajectory>,
    rewards: Vec<f64>,
    advantages: Vec<f64>,
}

impl Group {
    pub fn new(
        context: usize,
        trajectories: Vec<Trajectory>,
        rewards: Vec<f64>,
    ) -> Result<Self, EnvError> {
        if trajectories.len() < 2 {
            return Err(EnvError::DegenerateGroup(trajectories.len(), 2));
        }
        if trajectories.len() != rewards.len() {
            return Err(EnvError::ShapeMismatch(
                "trajectory and reward counts differ".into(),
            ));
        }
        if trajectories.iter().any(|t| t.context != context) {
            return Err(EnvError::ShapeMismatch(
                "trajectory context does not match group context".into(),
            ));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(EnvError::NonFiniteInput("rewards".into()));
        }
        let mean = pairwise_sum(&rewards) / rewards.len() as f64;
        let advantages = rewards.iter().map(|r| r - mean).collect();
        Ok(Group {
            context,
            trajectories,
            rewards,
            advantages,
        })
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }

    pub fn mean_reward(&self) -> f64 {
        pairwise_sum(&self.rewards) / self.rewards.len() as f64
    }

    /// Copy with trajectory `exclude` removed and advantages carried over
    /// from the full group (leave-one-out values keep full-group centering).
    pub fn subgroup(&self, exclude: usize) -> Group {
        assert!(exclude < self.len(), "exclude index out of range");
        let keep = |i: &usize| *i != exclude;
        Group {
            context: self.context,
            trajectories: (0..self.len())
                .filter(keep)
                .map(|i| self.trajectories[i].clone())
                .collect(),
            rewards: (0..self.len()).filter(keep).map(|i| self.rewards[i]).collect(),
            advantages: (0..self.len())
                .filter(keep)
                .map(|i| self.advantages[i])
                .collect(),
        }
    }

    /// Same trajectories, rewards re-scored by another model (advantages
    /// re-centered accordingly).
    pub fn rescored(&self, reward: &RewardModel) -> Group {
        let rewards: Vec<f64> = self.trajectories.iter().map(|t| reward.evaluate(t)).collect();
        Group::new(self.context, self.trajectories.clone(), rewards)
            .expect("rescoring a valid group cannot fail")
    }
}

/// Samples a group of `group_size` i.i.d. trajectories for one context and
/// scores them with `reward`. Identical `stream_seed` gives a bit-identical
/// group on every run and worker layout.
pub fn sample_group(
    policy: &TabularPolicy,
    reward: &RewardModel,
    context: usize,
    group_size: usize,
    stream_seed: u64,
) -> Result<Group, EnvError> {
    if group_size < 2 {
        return Err(EnvError::DegenerateGroup(group_size, 2));
    }
    if context >= policy.contexts() {
        return Err(EnvError::ShapeMismatch(format!(
            "context {context} out of range (have {})",
            policy.contexts()
        )));
    }
    let mut stream = Stream::from_seed(stream_seed);
    let trajectories: Vec<Trajectory> = (0..group_size)
        .map(|_| policy.sample_trajectory(context, &mut stream))
        .collect();
    let rewards: Vec<f64> = trajectories.iter().map(|t| reward.evaluate(t)).collect();
    Group::new(context, trajectories, rewards)
}
