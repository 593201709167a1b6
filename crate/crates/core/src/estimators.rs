//! Sampled-quantity layer: the k3 KL estimator, the upper-clipped partition
//! estimate and its leave-one-out variants, the jackknife combination, and
//! the advantage-independent baseline term.
//!
//! Two evaluation regimes share one set of per-trajectory statistics. When
//! every per-trajectory factor stays within e^±30 of 1 the code works with
//! deviations from 1 (`expm1`/`ln_1p`), which keeps the risk-plus-baseline
//! combination accurate even when lambda is 1e8 and the two pieces cancel to
//! ten digits. Outside that window (tiny lambda, strong tilts) it falls back
//! to shifted log-sum-exp, where absolute error of order epsilon times
//! lambda is harmless. Both regimes agree with naive arithmetic to 1e-12
//! relative wherever naive arithmetic does not overflow.

use crate::env::{EnvError, Group, TabularPolicy};
use crate::util::{log_sum_exp, pairwise_sum};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Per-trajectory factors below e^30 use the deviation-from-1 path.
const NEAR_REGIME_LOG_BOUND: f64 = 30.0;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("degenerate group: size {0} too small (need {1})")]
    DegenerateGroup(usize, usize),
    #[error("invalid clip epsilon {0}: must lie in (0, 1)")]
    InvalidClip(f64),
    #[error("invalid risk parameter {0}: lambda must be positive")]
    InvalidRisk(f64),
    #[error("quantity undefined at the infinite-lambda sentinel")]
    InfiniteRisk,
}

/// PPO-style clip width. The robust objective applies the upper clip only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClipSpec {
    pub epsilon: f64,
}

impl ClipSpec {
    pub fn new(epsilon: f64) -> Result<Self, EstimatorError> {
        let spec = ClipSpec { epsilon };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !(self.epsilon.is_finite() && 0.0 < self.epsilon && self.epsilon < 1.0) {
            return Err(EstimatorError::InvalidClip(self.epsilon));
        }
        Ok(())
    }

    /// ln(1 + epsilon), the upper clip boundary in log-ratio space.
    pub fn log_upper(&self) -> f64 {
        self.epsilon.ln_1p()
    }
}

/// Risk parameter: positive lambda, or the explicit risk-neutral sentinel.
/// The sentinel dispatches to exact limiting formulas rather than a huge
/// float.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lambda {
    Finite(f64),
    Infinite,
}

impl Lambda {
    pub fn finite(self) -> Option<f64> {
        match self {
            Lambda::Finite(v) => Some(v),
            Lambda::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Lambda::Infinite)
    }

    pub fn validate(self) -> Result<(), EstimatorError> {
        match self {
            Lambda::Finite(v) if v.is_finite() && v > 0.0 => Ok(()),
            Lambda::Finite(v) => Err(EstimatorError::InvalidRisk(v)),
            Lambda::Infinite => Ok(()),
        }
    }
}

impl std::fmt::Display for Lambda {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Lambda::Finite(v) => write!(f, "{v}"),
            Lambda::Infinite => write!(f, "inf"),
        }
    }
}

impl Serialize for Lambda {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Lambda::Finite(v) => serializer.serialize_f64(*v),
            Lambda::Infinite => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Lambda {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Number(v) => {
                if v.is_finite() && v > 0.0 {
                    Ok(Lambda::Finite(v))
                } else {
                    Err(D::Error::custom(format!(
                        "lambda must be positive and finite, got {v}"
                    )))
                }
            }
            Raw::Text(s) => match s.as_str() {
                "inf" | "infinity" | "Infinity" => Ok(Lambda::Infinite),
                other => Err(D::Error::custom(format!(
                    "lambda must be a positive number or \"inf\", got {other:?}"
                ))),
            },
        }
    }
}

/// How per-token terms aggregate within a trajectory: the paper-default
/// 1/|y| mean, or a plain sum for the sequence-level ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    TokenMean,
    SequenceSum,
}

/// Shape of the partition estimate: the verbatim token-averaged form, or the
/// trajectory-level ablation (one tilt per trajectory times the product of
/// clipped token ratios).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionForm {
    #[default]
    TokenLevel,
    TrajectoryLevel,
}

/// Per-trajectory statistics shared by partition values, the baseline, and
/// the analytic gradients.
#[derive(Clone, Debug)]
pub(crate) struct TrajStats {
    /// Raw log-ratios ln(pi_theta / pi_old) per token.
    pub log_ratios: Vec<f64>,
    /// Upper-clipped log-ratios min(log_ratio, ln(1+eps)).
    pub clipped_log_ratios: Vec<f64>,
    /// Token gradient mask: false once the upper clip has saturated
    /// (boundary inclusive).
    pub upper_active: Vec<bool>,
    /// -A_i / lambda (0 at the risk-neutral sentinel).
    pub tilt: f64,
    /// Token aggregation weight: 1/|y| or 1.
    pub token_weight: f64,
    /// Baseline aggregate of clipped ratios minus its on-policy anchor
    /// (token-mean anchor is 1; sequence-sum carries no anchor).
    pub baseline_dev: f64,
    /// Baseline aggregate itself.
    pub baseline_inner: f64,
    /// Partition-form aggregate deviation from 1 (anchored forms only).
    pub part_dev: f64,
    /// ln of the full per-trajectory partition term zeta_i.
    pub log_zeta: f64,
    /// zeta_i - 1; meaningful only in the near regime.
    pub zeta_dev: f64,
}

/// All per-trajectory statistics for one group plus the regime decision.
#[derive(Clone, Debug)]
pub(crate) struct GroupStats {
    pub trajs: Vec<TrajStats>,
    pub weighting: Weighting,
    pub form: PartitionForm,
}

impl GroupStats {
    pub fn compute(
        group: &Group,
        theta: &TabularPolicy,
        old: &TabularPolicy,
        lambda: Lambda,
        clip: ClipSpec,
        weighting: Weighting,
        form: PartitionForm,
    ) -> Result<Self, EstimatorError> {
        clip.validate()?;
        lambda.validate()?;
        if !theta.same_shape(old) {
            return Err(EnvError::ShapeMismatch(
                "theta and old policies differ in shape".into(),
            )
            .into());
        }
        if !theta.logits().all_finite() || !old.logits().all_finite() {
            return Err(EstimatorError::NonFiniteInput("policy logits".into()));
        }
        let log_upper = clip.log_upper();
        let mut trajs = Vec::with_capacity(group.len());
        for (trajectory, advantage) in group.trajectories().iter().zip(group.advantages()) {
            let theta_logs = theta.step_log_probs(trajectory);
            let old_logs = old.step_log_probs(trajectory);
            let log_ratios: Vec<f64> = theta_logs
                .iter()
                .zip(&old_logs)
                .map(|(a, b)| a - b)
                .collect();
            if log_ratios.iter().any(|r| !r.is_finite()) {
                return Err(EstimatorError::NonFiniteInput("token log-ratio".into()));
            }
            let clipped_log_ratios: Vec<f64> =
                log_ratios.iter().map(|r| r.min(log_upper)).collect();
            let upper_active: Vec<bool> = log_ratios.iter().map(|r| *r < log_upper).collect();
            let len = trajectory.len() as f64;
            let token_weight = match weighting {
                Weighting::TokenMean => 1.0 / len,
                Weighting::SequenceSum => 1.0,
            };
            let tilt = match lambda {
                Lambda::Finite(l) => -advantage / l,
                Lambda::Infinite => 0.0,
            };

            // Baseline aggregate over clipped token ratios.
            let (baseline_inner, baseline_dev) = match weighting {
                Weighting::TokenMean => {
                    let dev = clipped_log_ratios
                        .iter()
                        .map(|lc| lc.exp_m1())
                        .sum::<f64>()
                        / len;
                    (1.0 + dev, dev)
                }
                Weighting::SequenceSum => {
                    let inner: f64 = clipped_log_ratios.iter().map(|lc| lc.exp()).sum();
                    (inner, inner - len)
                }
            };

            // Partition-form aggregate.
            let (part_dev, log_part_inner) = match form {
                PartitionForm::TokenLevel => match weighting {
                    Weighting::TokenMean => (baseline_dev, baseline_dev.ln_1p()),
                    Weighting::SequenceSum => (baseline_inner - 1.0, baseline_inner.ln()),
                },
                PartitionForm::TrajectoryLevel => {
                    let total: f64 = clipped_log_ratios.iter().sum();
                    (total.exp_m1(), total)
                }
            };
            let log_zeta = tilt + log_part_inner;
            let zeta_dev = if log_zeta.abs() <= NEAR_REGIME_LOG_BOUND {
                (tilt + log_part_inner).exp_m1()
            } else {
                f64::NAN
            };

            trajs.push(TrajStats {
                log_ratios,
                clipped_log_ratios,
                upper_active,
                tilt,
                token_weight,
                baseline_dev,
                baseline_inner,
                part_dev,
                log_zeta,
                zeta_dev,
            });
        }
        Ok(GroupStats {
            trajs,
            weighting,
            form,
        })
    }

    pub fn len(&self) -> usize {
        self.trajs.len()
    }

    fn near_regime(&self, included: &[usize]) -> bool {
        let anchored = self.weighting == Weighting::TokenMean
            || self.form == PartitionForm::TrajectoryLevel;
        anchored
            && included
                .iter()
                .all(|&i| self.trajs[i].log_zeta.abs() <= NEAR_REGIME_LOG_BOUND)
    }

    /// ln of the partition estimate restricted to `included` trajectories.
    pub fn log_partition_over(&self, included: &[usize]) -> f64 {
        let m = included.len() as f64;
        if self.near_regime(included) {
            let devs: Vec<f64> = included.iter().map(|&i| self.trajs[i].zeta_dev).collect();
            (pairwise_sum(&devs) / m).ln_1p()
        } else {
            let logs: Vec<f64> = included.iter().map(|&i| self.trajs[i].log_zeta).collect();
            log_sum_exp(&logs) - m.ln()
        }
    }

    /// Partition deviation (Z - 1) over `included`; NaN outside the near
    /// regime.
    pub fn partition_dev_over(&self, included: &[usize]) -> f64 {
        let m = included.len() as f64;
        let devs: Vec<f64> = included.iter().map(|&i| self.trajs[i].zeta_dev).collect();
        pairwise_sum(&devs) / m
    }

    fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    fn loo_indices(&self, leave_out: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| i != leave_out).collect()
    }

    pub fn log_partition(&self) -> f64 {
        self.log_partition_over(&self.all_indices())
    }

    pub fn log_partition_loo(&self, leave_out: usize) -> f64 {
        self.log_partition_over(&self.loo_indices(leave_out))
    }

    /// Jackknife-combined log-partition:
    /// G ln Z - (G-1)/G * sum_j ln Z_{-j}.
    pub fn jackknife_log_partition(&self) -> f64 {
        let g = self.len() as f64;
        let full = self.log_partition();
        let loo: Vec<f64> = (0..self.len()).map(|j| self.log_partition_loo(j)).collect();
        g * full - (g - 1.0) / g * pairwise_sum(&loo)
    }

    /// Baseline aggregate S0 = (1/G) sum_i w_i sum_t clip(ratio).
    pub fn baseline_mean(&self) -> f64 {
        match self.weighting {
            Weighting::TokenMean => 1.0 + self.baseline_dev_mean(),
            Weighting::SequenceSum => {
                let inners: Vec<f64> =
                    self.trajs.iter().map(|t| t.baseline_inner).collect();
                pairwise_sum(&inners) / self.len() as f64
            }
        }
    }

    /// S0 - 1 under token-mean weighting.
    pub fn baseline_dev_mean(&self) -> f64 {
        let devs: Vec<f64> = self.trajs.iter().map(|t| t.baseline_dev).collect();
        pairwise_sum(&devs) / self.len() as f64
    }

    /// Risk term -lambda * L plus (optionally) the baseline lambda * S0,
    /// with or without the theta-independent constant lambda that the
    /// baseline contributes around its on-policy anchor.
    ///
    /// `centered == true` drops that constant; gradients are unchanged and
    /// finite differences stay conditioned at large lambda.
    pub fn risk_value(
        &self,
        lambda: f64,
        use_jackknife: bool,
        use_baseline: bool,
        centered: bool,
    ) -> f64 {
        let log_part = if use_jackknife {
            self.jackknife_log_partition()
        } else {
            self.log_partition()
        };
        if use_baseline {
            if self.weighting == Weighting::TokenMean {
                let core = lambda * (self.baseline_dev_mean() - log_part);
                if centered {
                    core
                } else {
                    lambda + core
                }
            } else {
                let value = -lambda * log_part + lambda * self.baseline_mean();
                if centered {
                    value - lambda
                } else {
                    value
                }
            }
        } else {
            -lambda * log_part
        }
    }
}

/// k3 KL estimate between the sampling policy and a reference:
/// (1/G) sum_i w_i sum_t (ratio - ln ratio - 1) with ratio =
/// pi_ref / pi_theta at the sampled token. Every per-token term is >= 0.
pub fn kl_estimator_k3(
    group: &Group,
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    weighting: Weighting,
) -> Result<f64, EstimatorError> {
    if !theta.same_shape(reference) {
        return Err(EnvError::ShapeMismatch(
            "theta and reference policies differ in shape".into(),
        )
        .into());
    }
    let per_traj: Vec<f64> = group
        .trajectories()
        .iter()
        .map(|trajectory| {
            let theta_logs = theta.step_log_probs(trajectory);
            let ref_logs = reference.step_log_probs(trajectory);
            let total: f64 = theta_logs
                .iter()
                .zip(&ref_logs)
                // d = ln(pi_ref / pi_theta); e^d - d - 1 >= 0, exactly 0 at d = 0.
                .map(|(lt, lr)| {
                    let d = lr - lt;
                    d.exp_m1() - d
                })
                .sum();
            match weighting {
                Weighting::TokenMean => total / trajectory.len() as f64,
                Weighting::SequenceSum => total,
            }
        })
        .collect();
    Ok(pairwise_sum(&per_traj) / group.len() as f64)
}

/// Clipped-ratio partition estimate Z_hat (log-space internally).
pub fn partition_hat(
    group: &Group,
    theta: &TabularPolicy,
    old: &TabularPolicy,
    risk: Lambda,
    clip: ClipSpec,
    weighting: Weighting,
    form: PartitionForm,
) -> Result<f64, EstimatorError> {
    Ok(log_partition_hat(group, theta, old, risk, clip, weighting, form)?.exp())
}

/// ln of the partition estimate.
pub fn log_partition_hat(
    group: &Group,
    theta: &TabularPolicy,
    old: &TabularPolicy,
    risk: Lambda,
    clip: ClipSpec,
    weighting: Weighting,
    form: PartitionForm,
) -> Result<f64, EstimatorError> {
    let stats = GroupStats::compute(group, theta, old, risk, clip, weighting, form)?;
    Ok(stats.log_partition())
}

/// Leave-one-out partition estimate with index `leave_out` removed.
/// Advantages keep their full-group centering, so the result equals
/// `partition_hat` on the explicitly copied subgroup bit for bit.
pub fn partition_loo(
    group: &Group,
    theta: &TabularPolicy,
    old: &TabularPolicy,
    risk: Lambda,
    clip: ClipSpec,
    weighting: Weighting,
    form: PartitionForm,
    leave_out: usize,
) -> Result<f64, EstimatorError> {
    if group.len() < 3 {
        return Err(EstimatorError::DegenerateGroup(group.len(), 3));
    }
    assert!(leave_out < group.len(), "leave_out index out of range");
    let stats = GroupStats::compute(group, theta, old, risk, clip, weighting, form)?;
    Ok(stats.log_partition_loo(leave_out).exp())
}

/// Jackknife-combined log-partition
/// ln Z_tilde = G ln Z_hat - (G-1)/G sum_j ln Z_hat_{-j}.
pub fn jackknife_log_partition(
    group: &Group,
    theta: &TabularPolicy,
    old: &TabularPolicy,
    risk: Lambda,
    clip: ClipSpec,
    weighting: Weighting,
    form: PartitionForm,
) -> Result<f64, EstimatorError> {
    if group.len() < 3 {
        return Err(EstimatorError::DegenerateGroup(group.len(), 3));
    }
    let stats = GroupStats::compute(group, theta, old, risk, clip, weighting, form)?;
    Ok(stats.jackknife_log_partition())
}

/// Advantage-independent baseline
/// lambda * (1/G) sum_i w_i sum_t min(pi_theta/pi_old, 1+eps).
///
/// Defined for finite lambda; the sentinel path never adds a baseline
/// because it dispatches to the risk-neutral objective as a whole.
pub fn baseline_term(
    group: &Group,
    theta: &TabularPolicy,
    old: &TabularPolicy,
    lambda: f64,
    clip: ClipSpec,
    weighting: Weighting,
) -> Result<f64, EstimatorError> {
    Lambda::Finite(lambda).validate()?;
    let stats = GroupStats::compute(
        group,
        theta,
        old,
        Lambda::Finite(lambda),
        clip,
        weighting,
        PartitionForm::TokenLevel,
    )?;
    Ok(lambda * stats.baseline_mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_group, RewardModel, TabularPolicy, Trajectory, VocabSpec};

    fn vocab() -> VocabSpec {
        VocabSpec::new(3, 2, 3).unwrap()
    }

    fn traj(context: usize, tokens: &[usize]) -> Trajectory {
        Trajectory {
            context,
            tokens: tokens.to_vec(),
        }
    }

    fn clip() -> ClipSpec {
        ClipSpec::new(0.2).unwrap()
    }

    fn random_group(policy: &TabularPolicy, seed: u64, g: usize) -> Group {
        let reward = RewardModel::target_match(vec![crate::env::TargetEntry {
            context: 0,
            tokens: vec![0, 1, 2],
        }]);
        sample_group(policy, &reward, 0, g, seed).unwrap()
    }

    /// Literal per-token transcription of the partition estimate in plain
    /// arithmetic; the independent oracle for the log-space path.
    fn naive_partition(
        group: &Group,
        theta: &TabularPolicy,
        old: &TabularPolicy,
        lambda: f64,
        epsilon: f64,
    ) -> f64 {
        let g = group.len() as f64;
        let mut total = 0.0;
        for (trajectory, advantage) in group.trajectories().iter().zip(group.advantages()) {
            let mut inner = 0.0;
            for (t, &token) in trajectory.tokens.iter().enumerate() {
                let prev = if t == 0 {
                    theta.vocab().bos_index()
                } else {
                    trajectory.tokens[t - 1]
                };
                let ratio = theta.token_log_prob(trajectory.context, t, prev, token).exp()
                    / old.token_log_prob(trajectory.context, t, prev, token).exp();
                inner += (-advantage / lambda).exp() * ratio.min(1.0 + epsilon);
            }
            total += inner / trajectory.len() as f64;
        }
        total / g
    }

    fn naive_baseline(
        group: &Group,
        theta: &TabularPolicy,
        old: &TabularPolicy,
        lambda: f64,
        epsilon: f64,
    ) -> f64 {
        let g = group.len() as f64;
        let mut total = 0.0;
        for trajectory in group.trajectories() {
            let mut inner = 0.0;
            for (t, &token) in trajectory.tokens.iter().enumerate() {
                let prev = if t == 0 {
                    theta.vocab().bos_index()
                } else {
                    trajectory.tokens[t - 1]
                };
                let ratio = theta.token_log_prob(trajectory.context, t, prev, token).exp()
                    / old.token_log_prob(trajectory.context, t, prev, token).exp();
                inner += ratio.min(1.0 + epsilon);
            }
            total += inner / trajectory.len() as f64;
        }
        lambda * total / g
    }

    #[test]
    fn k3_is_exactly_zero_for_identical_policies() {
        let policy = TabularPolicy::random(vocab(), 1, 5, 0.8).unwrap();
        let group = random_group(&policy, 11, 4);
        let kl = kl_estimator_k3(&group, &policy, &policy, Weighting::TokenMean).unwrap();
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn k3_single_token_closed_form() {
        // theta uniform over 2 tokens (0.5 each); reference puts 0.25 on the
        // sampled token. One term: 0.5 - ln 0.5 - 1 = ln 2 - 0.5.
        let vocab = VocabSpec::new(2, 1, 1).unwrap();
        let theta = TabularPolicy::uniform(vocab, 1).unwrap();
        let mut reference = TabularPolicy::uniform(vocab, 1).unwrap();
        // softmax([0, ln 3]) = (0.25, 0.75)
        reference.logits_mut().row_mut(0, 0, vocab.bos_index())[1] = 3.0f64.ln();
        let group = Group::new(
            0,
            vec![traj(0, &[0]), traj(0, &[0])],
            vec![0.5, 0.5],
        )
        .unwrap();
        let kl = kl_estimator_k3(&group, &theta, &reference, Weighting::TokenMean).unwrap();
        let expected = 2.0f64.ln() - 0.5;
        assert!((kl - expected).abs() < 1e-14, "kl {kl} vs {expected}");
    }

    #[test]
    fn k3_terms_are_nonnegative_for_random_policies() {
        let theta = TabularPolicy::random(vocab(), 1, 21, 1.0).unwrap();
        let reference = TabularPolicy::random(vocab(), 1, 22, 1.0).unwrap();
        for seed in 0..20 {
            let group = random_group(&theta, seed, 6);
            let kl = kl_estimator_k3(&group, &theta, &reference, Weighting::TokenMean).unwrap();
            assert!(kl >= 0.0);
        }
    }

    #[test]
    fn partition_is_exactly_one_on_policy_with_flat_rewards() {
        let policy = TabularPolicy::random(vocab(), 1, 3, 0.6).unwrap();
        let group = random_group(&policy, 7, 4).rescored(&RewardModel::constant(0.7));
        let z = partition_hat(
            &group,
            &policy,
            &policy,
            Lambda::Finite(0.5),
            clip(),
            Weighting::TokenMean,
            PartitionForm::TokenLevel,
        )
        .unwrap();
        assert_eq!(z, 1.0);
    }

    #[test]
    fn partition_taylor_limit_at_huge_lambda() {
        // On-policy: -lambda ln Z -> (1/G) sum_i (1/|y_i|) sum_t A_i.
        let policy = TabularPolicy::random(vocab(), 1, 9, 0.7).unwrap();
        let group = random_group(&policy, 13, 6);
        let lambda = 1e8;
        let log_z = log_partition_hat(
            &group,
            &policy,
            &policy,
            Lambda::Finite(lambda),
            clip(),
            Weighting::TokenMean,
            PartitionForm::TokenLevel,
        )
        .unwrap();
        let linear: f64 = group.advantages().iter().sum::<f64>() / group.len() as f64;
        assert!(
            (-lambda * log_z - linear).abs() < 1e-6,
            "limit {} vs {}",
            -lambda * log_z,
            linear
        );
        // Sentinel: Z_hat -> 1 exactly on-policy.
        let z_inf = partition_hat(
            &group,
            &policy,
            &policy,
            Lambda::Infinite,
            clip(),
            Weighting::TokenMean,
            PartitionForm::TokenLevel,
        )
        .unwrap();
        assert_eq!(z_inf, 1.0);
    }

    #[test]
    fn partition_matches_naive_transcription() {
        let theta = TabularPolicy::random(vocab(), 1, 31, 0.9).unwrap();
        let old = TabularPolicy::random(vocab(), 1, 32, 0.9).unwrap();
        let group = random_group(&old, 11, 5);
        let z = partition_hat(
            &group,
            &theta,
            &old,
            Lambda::Finite(0.5),
            clip(),
            Weighting::TokenMean,
            PartitionForm::TokenLevel,
        )
        .unwrap();
        let naive = naive_partition(&group, &theta, &old, 0.5, 0.2);
        assert!(
            ((z - naive) / naive).abs() < 1e-12,
            "log-space {z} vs naive {naive}"
        );
    }

    #[test]
    fn partition_stays_finite_where_naive_overflows() {
        let policy = TabularPolicy::random(vocab(), 1, 41, 0.5).unwrap();
        // Rewards [1,1,1,0] -> advantage -0.75 on the last trajectory, so the
        // naive tilt exp(0.75/1e-3) overflows while log-space stays finite.
        let sampled = random_group(&policy, 91, 4);
        let group = Group::new(
            0,
            sampled.trajectories().to_vec(),
            vec![1.0, 1.0, 1.0, 0.0],
        )
        .unwrap();
        let log_z = log_partition_hat(
            &group,
            &policy,
            &policy,
            Lambda::Finite(1e-3),
            clip(),
            Weighting::TokenMean,
            PartitionForm::TokenLevel,
        )
        .unwrap();
        assert!(log_z.is_finite());
        let naive = naive_partition(&group, &policy, &policy, 1e-3, 0.2);
        assert!(naive.is_infinite(), "naive arithmetic should overflow");
    }

    #[test]
    fn partition_is_invariant_to_reward_shifts() {
        // Dyadic rewards and shift keep the centering arithmetic exact, so
        // the partition values agree bit for bit.
        let policy = TabularPolicy::random(vocab(), 1, 17, 0.8).unwrap();
        let sampled = random_group(&policy, 23, 4);
        let base = Group::new(
            0,
            sampled.trajectories().to_vec(),
            vec![0.0, 0.25, 0.5, 1.0],
        )
        .unwrap();
        let shifted = Group::new(
            base.context(),
            base.trajectories().to_vec(),
            base.rewards().iter().map(|r| r + 2.0).collect(),
        )
        .unwrap();
        for (a, b) in base.advantages().iter().zip(shifted.advantages()) {
            assert_eq!(a, b);
        }
        let args = |g: &Group| {
            partition_hat(
                g,
                &policy,
                &policy,
                Lambda::Finite(0.3),
                clip(),
                Weighting::TokenMean,
                PartitionForm::TokenLevel,
            )
            .unwrap()
        };
        assert_eq!(args(&base), args(&shifted));
    }

    #[test]
    fn loo_equals_recompute_on_subgroup_exactly() {
        let theta = TabularPolicy::random(vocab(), 1, 51, 0.8).unwrap();
        let old = TabularPolicy::random(vocab(), 1, 52, 0.8).unwrap();
        let group = random_group(&old, 29, 5);
        for j in 0..group.len() {
            let loo = partition_loo(
                &group,
                &theta,
                &old,
                Lambda::Finite(0.7),
                clip(),
                Weighting::TokenMean,
                PartitionForm::TokenLevel,
                j,
            )
            .unwrap();
            let recomputed = partition_hat(
                &group.subgroup(j),
                &theta,
                &old,
                Lambda::Finite(0.7),
                clip(),
                Weighting::TokenMean,
                PartitionForm::TokenLevel,
            )
            .unwrap();
            assert_eq!(loo, recomputed, "leave-out {j}");
        }
    }

    #[test]
    fn loo_closed_form_for_symmetric_tilts() {
        // On-policy single-token trajectories with advantages (a, 0, -a):
        // per-trajectory terms are (e^{-a}, 1, e^{a}) at lambda = 1.
        let vocab = VocabSpec::new(2, 1, 1).unwrap();
        let policy = TabularPolicy::uniform(vocab, 1).unwrap();
        let a = 0.25;
        let group = Group::new(
            0,
            vec![traj(0, &[0]), traj(0, &[1]), traj(0, &[0])],
            vec![1.0 / 3.0 + a, 1.0 / 3.0, 1.0 / 3.0 - a],
        )
        .unwrap();
        let loo0 = partition_loo(
            &group,
            &policy,
            &policy,
            Lambda::Finite(1.0),
            clip(),
            Weighting::TokenMean,
            PartitionForm::TokenLevel,
            0,
        )
        .unwrap();
        let expected = (1.0 + a.exp()) / 2.0;
        assert!((loo0 - expected).abs() < 1e-12, "{loo0} vs {expected}");
    }

    #[test]
    fn loo_requires_group_of_three() {
        let policy = TabularPolicy::random(vocab(), 1, 61, 0.5).unwrap();
        let group = random_group(&policy, 3, 2);
        let err = partition_loo(
            &group,
            &policy,
            &policy,
            Lambda::Finite(1.0),
            clip(),
            Weighting::TokenMean,
            PartitionForm::TokenLevel,
            0,
        );
        assert!(matches!(err, Err(EstimatorError::DegenerateGroup(2, 3))));
    }

    #[test]
    fn jackknife_of_constant_terms_is_the_plain_value() {
        // Constant rewards on-policy: every per-trajectory term is 1, so the
        // plain and jackknife log-partitions are both exactly 0.
        let policy = TabularPolicy::random(vocab(), 1, 71, 0.5).unwrap();
        let group = random_group(&policy, 37, 4).rescored(&RewardModel::constant(0.25));
        let plain = log_partition_hat(
            &group,
            &policy,
            &policy,
            Lambda::Finite(0.5),
            clip(),
            Weighting::TokenMean,
            PartitionForm::TokenLevel,
        )
        .unwrap();
        let jack = jackknife_log_partition(
            &group,
            &policy,
            &policy,
            Lambda::Finite(0.5),
            clip(),
            Weighting::TokenMean,
            PartitionForm::TokenLevel,
        )
        .unwrap();
        assert_eq!(plain, 0.0);
        assert_eq!(jack, 0.0);
    }

    #[test]
    fn jackknife_matches_its_defining_linear_combination() {
        let theta = TabularPolicy::random(vocab(), 1, 81, 0.7).unwrap();
        let old = TabularPolicy::random(vocab(), 1, 82, 0.7).unwrap();
        let group = random_group(&old, 43, 5);
        let args = (
            Lambda::Finite(0.4),
            clip(),
            Weighting::TokenMean,
            PartitionForm::TokenLevel,
        );
        let jack =
            jackknife_log_partition(&group, &theta, &old, args.0, args.1, args.2, args.3).unwrap();
        let g = group.len() as f64;
        let full = log_partition_hat(&group, &theta, &old, args.0, args.1, args.2, args.3)
            .unwrap();
        let loo_sum: f64 = (0..group.len())
            .map(|j| {
                partition_loo(&group, &theta, &old, args.0, args.1, args.2, args.3, j)
                    .unwrap()
                    .ln()
            })
            .sum();
        let assembled = g * full - (g - 1.0) / g * loo_sum;
        assert!((jack - assembled).abs() < 1e-12);
    }

    #[test]
    fn baseline_is_exactly_lambda_on_policy() {
        let policy = TabularPolicy::random(vocab(), 1, 91, 0.9).unwrap();
        let group = random_group(&policy, 53, 4);
        let value =
            baseline_term(&group, &policy, &policy, 0.37, clip(), Weighting::TokenMean).unwrap();
        assert_eq!(value, 0.37);
    }

    #[test]
    fn baseline_saturates_at_clip_ceiling() {
        // Push theta hard toward the sampled tokens so every ratio clips.
        let old = TabularPolicy::uniform(vocab(), 1).unwrap();
        let group = random_group(&old, 59, 4);
        let mut theta = old.clone();
        for trajectory in group.trajectories() {
            for (t, &token) in trajectory.tokens.iter().enumerate() {
                let prev = if t == 0 {
                    theta.vocab().bos_index()
                } else {
                    trajectory.tokens[t - 1]
                };
                theta.logits_mut().row_mut(0, t, prev)[token] = 10.0;
            }
        }
        let lambda = 2.0;
        let value =
            baseline_term(&group, &theta, &old, lambda, clip(), Weighting::TokenMean).unwrap();
        assert!(
            (value - lambda * 1.2).abs() < 1e-12,
            "value {value} vs {}",
            lambda * 1.2
        );
    }

    #[test]
    fn baseline_matches_naive_transcription_and_ignores_rewards() {
        let theta = TabularPolicy::random(vocab(), 1, 101, 0.8).unwrap();
        let old = TabularPolicy::random(vocab(), 1, 102, 0.8).unwrap();
        let group = random_group(&old, 61, 5);
        let value =
            baseline_term(&group, &theta, &old, 1.3, clip(), Weighting::TokenMean).unwrap();
        let naive = naive_baseline(&group, &theta, &old, 1.3, 0.2);
        assert!(((value - naive) / naive).abs() < 1e-12);
        // Advantage independence: rescoring with any reward model leaves the
        // baseline untouched.
        let rescored = group.rescored(&RewardModel::constant(0.9));
        let again =
            baseline_term(&rescored, &theta, &old, 1.3, clip(), Weighting::TokenMean).unwrap();
        assert_eq!(value, again);
    }

    #[test]
    fn clip_and_lambda_validation() {
        assert!(ClipSpec::new(0.0).is_err());
        assert!(ClipSpec::new(1.0).is_err());
        assert!(ClipSpec::new(0.2).is_ok());
        assert!(Lambda::Finite(-1.0).validate().is_err());
        assert!(Lambda::Finite(0.0).validate().is_err());
        assert!(Lambda::Infinite.validate().is_ok());
    }

    #[test]
    fn lambda_serde_accepts_numbers_and_inf() {
        let finite: Lambda = serde_json::from_str("0.5").unwrap();
        assert_eq!(finite, Lambda::Finite(0.5));
        let infinite: Lambda = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(infinite, Lambda::Infinite);
        assert!(serde_json::from_str::<Lambda>("-2.0").is_err());
        assert_eq!(serde_json::to_string(&Lambda::Infinite).unwrap(), "\"inf\"");
    }
}
