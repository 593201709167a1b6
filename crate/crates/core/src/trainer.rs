//! Outer optimization loop: lagged sampling policy synced every K
//! iterations, per-context group sampling on independent derived streams,
//! one gradient ascent step per sampled batch (SGD with optional classical
//! momentum), and exact per-iteration diagnostics computed by enumeration.
//!
//! Identical (config, seed) pairs produce bit-identical logs and final
//! logits on any worker count: sampling streams are keyed by (seed,
//! iteration, context), parallel results collect in context order, and
//! reductions run in a fixed pairwise tree.

use crate::env::{
    exact_kl, expected_reward, sample_group, trajectory_entropy, EnvError, Group, PromptDist,
    RewardModel, TabularPolicy,
};
use crate::estimators::{ClipSpec, Lambda, PartitionForm, Weighting};
use crate::logits::LogitTensor;
use crate::objectives::{
    frpo_gradient, frpo_objective, grpo_gradient, grpo_objective, ObjectiveConfig, ObjectiveError,
};
use crate::rng::{derive_seed, Stream};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Gradient-norm ceiling; crossing it aborts the run as diverged.
pub const DIVERGENCE_GRAD_NORM: f64 = 1e6;

const ITERATION_STREAM_TAG: u64 = 0x6974_6572;
const EPOCH_STREAM_TAG: u64 = 0x6570_6f63;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("divergence detected at iteration {iteration}: gradient norm {grad_norm:e}")]
    Diverged {
        iteration: usize,
        grad_norm: f64,
        /// Log of the iterations completed before the abort.
        partial_log: TrainLog,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Grpo,
    Frpo,
}

/// Everything one training run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub risk: Lambda,
    pub beta: f64,
    pub clip: ClipSpec,
    pub group_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    pub iterations: usize,
    #[serde(default = "default_sync_every")]
    pub sync_every: usize,
    pub minibatch_contexts: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub use_baseline: bool,
    #[serde(default = "default_true")]
    pub use_jackknife: bool,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default)]
    pub partition_form: PartitionForm,
    /// Drop the lambda prefactor on the risk-plus-baseline term so gradient
    /// norms stay comparable across lambda values.
    #[serde(default)]
    pub normalize_risk_scale: bool,
}

fn default_sync_every() -> usize {
    1
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self, contexts: usize) -> Result<(), TrainError> {
        self.objective_config().validate()?;
        if self.group_size < 2 {
            return Err(TrainError::InvalidConfig(format!(
                "group_size {} below 2",
                self.group_size
            )));
        }
        if self.algorithm == Algorithm::Frpo
            && self.use_jackknife
            && !self.risk.is_infinite()
            && self.group_size < 3
        {
            return Err(TrainError::InvalidConfig(
                "group_size must be at least 3 with the jackknife enabled".into(),
            ));
        }
        // learning_rate 0 is allowed: the run becomes an exact no-op, which
        // the CLI relies on as a determinism probe.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(TrainError::InvalidConfig(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.sync_every == 0 {
            return Err(TrainError::InvalidConfig("sync_every must be >= 1".into()));
        }
        if self.minibatch_contexts == 0 || self.minibatch_contexts > contexts {
            return Err(TrainError::InvalidConfig(format!(
                "minibatch_contexts {} outside 1..={contexts}",
                self.minibatch_contexts
            )));
        }
        Ok(())
    }

    fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            risk: self.risk,
            clip: self.clip,
            beta: self.beta,
            use_baseline: self.use_baseline,
            use_jackknife: self.use_jackknife,
            weighting: self.weighting,
            partition_form: self.partition_form,
        }
    }
}

/// One row of the training log. Reward, KL, and entropy are exact
/// (enumeration) for the post-update policy; the objective is the sampled
/// batch value at the pre-update policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mean_reward: f64,
    pub kl_to_ref: f64,
    pub entropy: f64,
    pub objective: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<IterationRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str =
        "iteration,mean_reward,kl_to_ref,entropy,objective,grad_norm";

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iteration, r.mean_reward, r.kl_to_ref, r.entropy, r.objective, r.grad_norm
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to vec");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

/// Incremental trainer; [`train`] drives it to completion, the two-stage
/// experiments step it manually to record checkpoints in between.
pub struct Trainer {
    cfg: TrainConfig,
    prompt_dist: PromptDist,
    reward: RewardModel,
    reference: TabularPolicy,
    policy: TabularPolicy,
    old: TabularPolicy,
    velocity: LogitTensor,
    epoch_pool: Vec<usize>,
    epochs_drawn: u64,
    iteration: usize,
    log: TrainLog,
}

impl Trainer {
    /// The reference policy is snapshotted from the initialization, which is
    /// the tabular analog of penalizing drift from the pre-training model.
    pub fn new(
        init: TabularPolicy,
        prompt_dist: PromptDist,
        reward: RewardModel,
        cfg: TrainConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate(init.contexts())?;
        if prompt_dist.len() != init.contexts() {
            return Err(EnvError::ShapeMismatch(
                "prompt distribution does not match policy contexts".into(),
            )
            .into());
        }
        reward.validate().map_err(TrainError::Env)?;
        let velocity = LogitTensor::zeros(init.logits().shape());
        Ok(Trainer {
            old: init.clone(),
            reference: init.clone(),
            policy: init,
            prompt_dist,
            reward,
            cfg,
            velocity,
            epoch_pool: Vec::new(),
            epochs_drawn: 0,
            iteration: 0,
            log: TrainLog::default(),
        })
    }

    pub fn policy(&self) -> &TabularPolicy {
        &self.policy
    }

    pub fn reference(&self) -> &TabularPolicy {
        &self.reference
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Contexts for this iteration, drawn without replacement per epoch.
    fn next_minibatch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.cfg.minibatch_contexts);
        while batch.len() < self.cfg.minibatch_contexts {
            if self.epoch_pool.is_empty() {
                self.epoch_pool = (0..self.policy.contexts()).collect();
                let mut stream = Stream::derived(
                    self.cfg.seed,
                    &[EPOCH_STREAM_TAG, self.epochs_drawn],
                );
                stream.shuffle(&mut self.epoch_pool);
                self.epochs_drawn += 1;
            }
            batch.push(self.epoch_pool.pop().expect("pool refilled above"));
        }
        batch
    }

    /// Runs one iteration of the outer loop and returns its record.
    pub fn step(&mut self) -> Result<IterationRecord, TrainError> {
        if self.iteration % self.cfg.sync_every == 0 {
            self.old = self.policy.clone();
        }
        let batch = self.next_minibatch();
        let seed = self.cfg.seed;
        let iteration = self.iteration as u64;
        let old = &self.old;
        let reward = &self.reward;
        let group_size = self.cfg.group_size;
        let groups: Vec<Group> = batch
            .par_iter()
            .map(|&context| {
                let stream_seed =
                    derive_seed(seed, &[ITERATION_STREAM_TAG, iteration, context as u64]);
                sample_group(old, reward, context, group_size, stream_seed)
            })
            .collect::<Result<_, _>>()?;

        let obj_cfg = self.cfg.objective_config();
        let (objective, gradient) = match self.cfg.algorithm {
            Algorithm::Grpo => (
                grpo_objective(&groups, &self.policy, &self.old, &self.reference, &obj_cfg)?,
                grpo_gradient(&groups, &self.policy, &self.old, &self.reference, &obj_cfg)?,
            ),
            Algorithm::Frpo => match (self.cfg.normalize_risk_scale, self.cfg.risk.finite()) {
                (true, Some(lambda)) => {
                    // Scale the risk-plus-baseline term by 1/lambda while
                    // keeping beta: evaluate with beta * lambda, divide by
                    // lambda.
                    let mut scaled = obj_cfg;
                    scaled.beta = obj_cfg.beta * lambda;
                    let value = frpo_objective(
                        &groups,
                        &self.policy,
                        &self.old,
                        &self.reference,
                        &scaled,
                    )? / lambda;
                    let mut grad = frpo_gradient(
                        &groups,
                        &self.policy,
                        &self.old,
                        &self.reference,
                        &scaled,
                    )?;
                    grad.scale(1.0 / lambda);
                    (value, grad)
                }
                _ => (
                    frpo_objective(&groups, &self.policy, &self.old, &self.reference, &obj_cfg)?,
                    frpo_gradient(&groups, &self.policy, &self.old, &self.reference, &obj_cfg)?,
                ),
            },
        };

        let grad_norm = gradient.norm_l2();
        if !grad_norm.is_finite() || grad_norm > DIVERGENCE_GRAD_NORM {
            return Err(TrainError::Diverged {
                iteration: self.iteration,
                grad_norm,
                partial_log: self.log.clone(),
            });
        }

        // Classical momentum ascent: v <- mu v + g; theta <- theta + lr v.
        self.velocity.scale(self.cfg.momentum);
        self.velocity.axpy(1.0, &gradient);
        let lr = self.cfg.learning_rate;
        self.policy.logits_mut().axpy(lr, &self.velocity);
        if !self.policy.logits().all_finite() {
            return Err(TrainError::Diverged {
                iteration: self.iteration,
                grad_norm,
                partial_log: self.log.clone(),
            });
        }

        let record = IterationRecord {
            iteration: self.iteration,
            mean_reward: expected_reward(&self.policy, &self.reward, &self.prompt_dist)?,
            kl_to_ref: exact_kl(&self.policy, &self.reference, &self.prompt_dist)?,
            entropy: trajectory_entropy(&self.policy, &self.prompt_dist)?,
            objective,
            grad_norm,
        };
        self.log.records.push(record);
        self.iteration += 1;
        Ok(record)
    }

    pub fn into_result(self) -> (TabularPolicy, TrainLog) {
        (self.policy, self.log)
    }
}

/// Runs the full loop: returns the final policy and one record per
/// iteration.
pub fn train(
    init: TabularPolicy,
    prompt_dist: PromptDist,
    reward: RewardModel,
    cfg: TrainConfig,
) -> Result<(TabularPolicy, TrainLog), TrainError> {
    let iterations = cfg.iterations;
    let mut trainer = Trainer::new(init, prompt_dist, reward, cfg)?;
    for _ in 0..iterations {
        trainer.step()?;
    }
    Ok(trainer.into_result())
}

/// Exact trajectory-distribution entropy under the prompt distribution;
/// monitors the collapse mode that the baseline prevents.
pub fn entropy(policy: &TabularPolicy, prompt_dist: &PromptDist) -> Result<f64, EnvError> {
    trajectory_entropy(policy, prompt_dist)
}
