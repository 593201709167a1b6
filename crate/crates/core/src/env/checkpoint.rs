//! Versioned JSON checkpoints for policies and reward tables.
//!
//! Logits are written as nested `[context][position][prev][token]` arrays.
//! serde_json emits the shortest decimal that round-trips each IEEE-754
//! double, so save/load is value-exact and repeated saves are byte-identical.

use crate::env::base::{EnvError, VocabSpec};
use crate::env::policy::TabularPolicy;
use crate::env::reward::RewardModel;
use crate::logits::LogitTensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyCheckpoint {
    version: u32,
    vocab: VocabSpec,
    logits: Vec<Vec<Vec<Vec<f64>>>>,
}

pub fn policy_to_json(policy: &TabularPolicy) -> String {
    let doc = PolicyCheckpoint {
        version: CHECKPOINT_VERSION,
        vocab: *policy.vocab(),
        logits: policy.logits().to_nested(),
    };
    serde_json::to_string_pretty(&doc).expect("policy checkpoint serialization")
}

pub fn policy_from_json(json: &str) -> Result<TabularPolicy, EnvError> {
    let doc: PolicyCheckpoint =
        serde_json::from_str(json).map_err(|e| EnvError::Checkpoint(e.to_string()))?;
    if doc.version != CHECKPOINT_VERSION {
        return Err(EnvError::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            doc.version
        )));
    }
    let logits = LogitTensor::from_nested(&doc.logits).map_err(EnvError::Checkpoint)?;
    TabularPolicy::from_logits(doc.vocab, logits)
}

pub fn save_policy(policy: &TabularPolicy, path: &Path) -> Result<(), EnvError> {
    std::fs::write(path, policy_to_json(policy))
        .map_err(|e| EnvError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_policy(path: &Path) -> Result<TabularPolicy, EnvError> {
    let json = std::fs::read_to_string(path)
        .map_err(|e| EnvError::Checkpoint(format!("{}: {e}", path.display())))?;
    policy_from_json(&json)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RewardCheckpoint {
    version: u32,
    reward: RewardModel,
}

pub fn reward_to_json(reward: &RewardModel) -> String {
    let doc = RewardCheckpoint {
        version: CHECKPOINT_VERSION,
        reward: reward.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("reward serialization")
}

pub fn reward_from_json(json: &str) -> Result<RewardModel, EnvError> {
    let doc: RewardCheckpoint =
        serde_json::from_str(json).map_err(|e| EnvError::Checkpoint(e.to_string()))?;
    if doc.version != CHECKPOINT_VERSION {
        return Err(EnvError::Checkpoint(format!(
            "unsupported reward file version {} (expected {CHECKPOINT_VERSION})",
            doc.version
        )));
    }
    doc.reward.validate()?;
    Ok(doc.reward)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_round_trip_is_value_exact() {
        let vocab = VocabSpec::new(3, 2, 2).unwrap();
        let policy = TabularPolicy::random(vocab, 2, 99, 1.7).unwrap();
        let json = policy_to_json(&policy);
        let back = policy_from_json(&json).unwrap();
        assert_eq!(policy.logits().as_slice(), back.logits().as_slice());
        // Re-serialization is byte-identical.
        assert_eq!(json, policy_to_json(&back));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let vocab = VocabSpec::new(2, 1, 1).unwrap();
        let policy = TabularPolicy::uniform(vocab, 1).unwrap();
        let json = policy_to_json(&policy).replace("\"version\": 1", "\"version\": 2");
        assert!(policy_from_json(&json).is_err());
    }
}
