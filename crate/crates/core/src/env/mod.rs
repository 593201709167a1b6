//! Tabular substrate: vocabularies, policies, rewards, sampled groups, and
//! exact divergences computed by enumeration.

mod base;
mod checkpoint;
mod policy;
mod reward;
mod sample;

pub use base::{EnvError, PromptDist, Trajectory, VocabSpec};
pub use checkpoint::{
    load_policy, policy_from_json, policy_to_json, reward_from_json, reward_to_json, save_policy,
    CHECKPOINT_VERSION,
};
pub use policy::{
    enumerate_trajectories, exact_kl, expected_reward, trajectory_entropy, TabularPolicy,
};
pub use reward::{
    CompositePart, CompositeReward, RewardModel, TableEntry, TableReward, TargetEntry,
    TargetMatchReward,
};
pub use sample::{sample_group, Group};
