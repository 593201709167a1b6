//! Desk-scale laboratory for group-relative policy optimization and its
//! robust, risk-sensitive variant on exactly enumerable tabular policies.
//!
//! Everything runs on softmax policies small enough to enumerate, so every
//! sampled quantity in the training stack has an exact counterpart: KL
//! divergences, partition functions, worst-case reward over a KL ball,
//! gradients, and estimator bias are all checked against enumeration rather
//! than against other Monte Carlo code.
//!
//! Modules map onto the layers of the stack:
//!
//! - [`env`]: vocabularies, tabular policies, rewards, sampled groups,
//!   enumeration, exact divergences, checkpoints.
//! - [`estimators`]: k3 KL estimator, clipped partition estimate,
//!   leave-one-out and jackknife combinations, baseline term.
//! - [`objectives`]: full objective values, analytic gradients, and
//!   finite-difference verification.
//! - [`dual`]: exact inner minimization over a KL ball, Gibbs tilt, dual
//!   value, duality gap, entropic risk, mean-variance approximation.
//! - [`trainer`]: the outer optimization loop with lagged sampling policy.
//! - [`downstream`]: two-stage train-then-finetune retention experiments.
//! - [`lab`]: estimator bias and gradient-variance measurements.

pub mod dual;
pub mod env;
pub mod objectives;
pub mod trainer;
pub mod estimators;
pub mod logits;
pub mod rng;
pub mod util;

pub use env::{
    enumerate_trajectories, exact_kl, expected_reward, sample_group, trajectory_entropy,
    EnvError, Group, PromptDist, RewardModel, TabularPolicy, Trajectory, VocabSpec,
};
pub use estimators::{
    baseline_term, jackknife_log_partition, kl_estimator_k3, log_partition_hat, partition_hat,
    partition_loo, ClipSpec, EstimatorError, Lambda, PartitionForm, Weighting,
};
pub use logits::{Gradient, LogitShape, LogitTensor};
