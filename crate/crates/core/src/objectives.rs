//! Objective values and analytic gradients for both algorithms, plus the
//! finite-difference harness that verifies every gradient path.
//!
//! Gradients differentiate the written Monte Carlo objectives on frozen
//! groups. Saturated clips contribute zero gradient through the ratio, with
//! the boundary itself treated as saturated. At the risk-neutral sentinel
//! the robust objective and gradient dispatch to the group-relative code
//! path, so the two algorithms coincide bit for bit there.

use crate::env::{EnvError, Group, TabularPolicy, Trajectory};
use crate::estimators::{
    kl_estimator_k3, ClipSpec, EstimatorError, GroupStats, Lambda, PartitionForm, Weighting,
};
use crate::logits::Gradient;
use crate::util::{mean, pairwise_sum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("objective is not deterministic: repeated evaluations gave {0} and {1}")]
    NonDeterministicObjective(f64, f64),
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    InvalidStep(f64),
    #[error("invalid objective config: {0}")]
    InvalidConfig(String),
}

/// Everything the objectives need beyond the policies and groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub risk: Lambda,
    pub clip: ClipSpec,
    pub beta: f64,
    pub use_baseline: bool,
    pub use_jackknife: bool,
    pub weighting: Weighting,
    pub partition_form: PartitionForm,
}

impl ObjectiveConfig {
    pub fn new(risk: Lambda, clip: ClipSpec) -> Self {
        ObjectiveConfig {
            risk,
            clip,
            beta: 0.0,
            use_baseline: true,
            use_jackknife: true,
            weighting: Weighting::TokenMean,
            partition_form: PartitionForm::TokenLevel,
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        self.risk.validate()?;
        self.clip.validate()?;
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "beta {} must be finite and nonnegative",
                self.beta
            )));
        }
        Ok(())
    }
}

fn check_policies(
    groups: &[Group],
    theta: &TabularPolicy,
    old: &TabularPolicy,
    reference: &TabularPolicy,
) -> Result<(), ObjectiveError> {
    if groups.is_empty() {
        return Err(ObjectiveError::InvalidConfig("no groups supplied".into()));
    }
    if !theta.same_shape(old) || !theta.same_shape(reference) {
        return Err(
            EnvError::ShapeMismatch("policies differ in vocabulary or context count".into()).into(),
        );
    }
    Ok(())
}

/// Clipped-surrogate objective with two-sided clip and k3 KL penalty:
/// mean_x[(1/G) sum_i w_i sum_t min(s A, clip(s) A)] - beta * k3.
pub fn grpo_objective(
    groups: &[Group],
    theta: &TabularPolicy,
    old: &TabularPolicy,
    reference: &TabularPolicy,
    cfg: &ObjectiveConfig,
) -> Result<f64, ObjectiveError> {
    cfg.validate()?;
    check_policies(groups, theta, old, reference)?;
    let lower = 1.0 - cfg.clip.epsilon;
    let upper = 1.0 + cfg.clip.epsilon;
    let mut surrogates = Vec::with_capacity(groups.len());
    let mut penalties = Vec::with_capacity(groups.len());
    for group in groups {
        let mut per_traj = Vec::with_capacity(group.len());
        for (trajectory, &advantage) in group.trajectories().iter().zip(group.advantages()) {
            let theta_logs = theta.step_log_probs(trajectory);
            let old_logs = old.step_log_probs(trajectory);
            let total: f64 = theta_logs
                .iter()
                .zip(&old_logs)
                .map(|(lt, lo)| {
                    let ratio = (lt - lo).exp();
                    let clamped = ratio.clamp(lower, upper);
                    (ratio * advantage).min(clamped * advantage)
                })
                .sum();
            per_traj.push(match cfg.weighting {
                Weighting::TokenMean => total / trajectory.len() as f64,
                Weighting::SequenceSum => total,
            });
        }
        surrogates.push(pairwise_sum(&per_traj) / group.len() as f64);
        penalties.push(kl_estimator_k3(group, theta, reference, cfg.weighting)?);
    }
    Ok(mean(&surrogates) - cfg.beta * mean(&penalties))
}

/// Robust objective: mean_x[-lambda (ln Z_tilde or ln Z_hat) + baseline]
/// - beta * k3. The infinite-lambda sentinel dispatches to
/// [`grpo_objective`] (its exact limit, divergent additive constant
/// removed).
pub fn frpo_objective(
    groups: &[Group],
    theta: &TabularPolicy,
    old: &TabularPolicy,
    reference: &TabularPolicy,
    cfg: &ObjectiveConfig,
) -> Result<f64, ObjectiveError> {
    frpo_objective_impl(groups, theta, old, reference, cfg, false)
}

/// [`frpo_objective`] minus the theta-independent constant lambda that the
/// baseline contributes at its on-policy anchor. Gradients are identical;
/// finite differences on this form stay conditioned at large lambda.
pub fn frpo_objective_centered(
    groups: &[Group],
    theta: &TabularPolicy,
    old: &TabularPolicy,
    reference: &TabularPolicy,
    cfg: &ObjectiveConfig,
) -> Result<f64, ObjectiveError> {
    frpo_objective_impl(groups, theta, old, reference, cfg, true)
}

fn frpo_objective_impl(
    groups: &[Group],
    theta: &TabularPolicy,
    old: &TabularPolicy,
    reference: &TabularPolicy,
    cfg: &ObjectiveConfig,
    centered: bool,
) -> Result<f64, ObjectiveError> {
    cfg.validate()?;
    check_policies(groups, theta, old, reference)?;
    let lambda = match cfg.risk.finite() {
        Some(l) => l,
        None => return grpo_objective(groups, theta, old, reference, cfg),
    };
    if cfg.use_jackknife {
        if let Some(small) = groups.iter().find(|g| g.len() < 3) {
            return Err(EstimatorError::DegenerateGroup(small.len(), 3).into());
        }
    }
    let mut risk_values = Vec::with_capacity(groups.len());
    let mut penalties = Vec::with_capacity(groups.len());
    for group in groups {
        let stats = GroupStats::compute(
            group,
            theta,
            old,
            cfg.risk,
            cfg.clip,
            cfg.weighting,
            cfg.partition_form,
        )?;
        risk_values.push(stats.risk_value(lambda, cfg.use_jackknife, cfg.use_baseline, centered));
        penalties.push(kl_estimator_k3(group, theta, reference, cfg.weighting)?);
    }
    Ok(mean(&risk_values) - cfg.beta * mean(&penalties))
}

/// Gradient of ln pi(trajectory) with respect to the logits: one-hot minus
/// softmax on each visited row, zero elsewhere. Row sums vanish by the
/// softmax score property.
pub fn score_gradient(policy: &TabularPolicy, trajectory: &Trajectory) -> Gradient {
    let mut grad = Gradient::zeros(policy.logits().shape());
    for (t, &token) in trajectory.tokens.iter().enumerate() {
        let prev = if t == 0 {
            policy.vocab().bos_index()
        } else {
            trajectory.tokens[t - 1]
        };
        accumulate_score(&mut grad, policy, trajectory.context, t, prev, token, 1.0);
    }
    grad
}

/// Adds `scale * (one_hot(token) - softmax(row))` into the gradient row.
fn accumulate_score(
    grad: &mut Gradient,
    policy: &TabularPolicy,
    context: usize,
    position: usize,
    prev: usize,
    token: usize,
    scale: f64,
) {
    let probs = policy.prob_row(context, position, prev);
    let row = grad.row_mut(context, position, prev);
    for (v, p) in probs.iter().enumerate() {
        row[v] -= scale * p;
    }
    row[token] += scale;
}

/// Per-token coefficients for one group under one algorithm, already
/// multiplied by their aggregation weights. `grad += sum coeff * score`.
fn accumulate_group_gradient(
    grad: &mut Gradient,
    group: &Group,
    theta: &TabularPolicy,
    coeff: &[Vec<f64>],
) {
    for (trajectory, coeffs) in group.trajectories().iter().zip(coeff) {
        for (t, (&token, &c)) in trajectory.tokens.iter().zip(coeffs).enumerate() {
            if c == 0.0 {
                continue;
            }
            let prev = if t == 0 {
                theta.vocab().bos_index()
            } else {
                trajectory.tokens[t - 1]
            };
            accumulate_score(grad, theta, trajectory.context, t, prev, token, c);
        }
    }
}

/// Shared beta coefficient of the k3 penalty: beta * (pi_ref/pi_theta - 1)
/// per token.
fn beta_coefficients(
    group: &Group,
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    beta: f64,
    weighting: Weighting,
) -> Vec<Vec<f64>> {
    group
        .trajectories()
        .iter()
        .map(|trajectory| {
            let theta_logs = theta.step_log_probs(trajectory);
            let ref_logs = reference.step_log_probs(trajectory);
            let tw = match weighting {
                Weighting::TokenMean => 1.0 / trajectory.len() as f64,
                Weighting::SequenceSum => 1.0,
            } / group.len() as f64;
            theta_logs
                .iter()
                .zip(&ref_logs)
                .map(|(lt, lr)| tw * beta * (lr - lt).exp_m1())
                .collect()
        })
        .collect()
}

/// Analytic gradient of the clipped surrogate plus k3 penalty. Valid on or
/// off policy; through saturated clips the gradient is zero.
pub fn grpo_gradient(
    groups: &[Group],
    theta: &TabularPolicy,
    old: &TabularPolicy,
    reference: &TabularPolicy,
    cfg: &ObjectiveConfig,
) -> Result<Gradient, ObjectiveError> {
    cfg.validate()?;
    check_policies(groups, theta, old, reference)?;
    let log_upper = cfg.clip.log_upper();
    let log_lower = (1.0 - cfg.clip.epsilon).ln();
    let per_group: Vec<Gradient> = groups
        .iter()
        .map(|group| {
            let mut coeff = beta_coefficients(group, theta, reference, cfg.beta, cfg.weighting);
            for ((trajectory, &advantage), coeffs) in group
                .trajectories()
                .iter()
                .zip(group.advantages())
                .zip(coeff.iter_mut())
            {
                let theta_logs = theta.step_log_probs(trajectory);
                let old_logs = old.step_log_probs(trajectory);
                let tw = match cfg.weighting {
                    Weighting::TokenMean => 1.0 / trajectory.len() as f64,
                    Weighting::SequenceSum => 1.0,
                } / group.len() as f64;
                for (t, (lt, lo)) in theta_logs.iter().zip(&old_logs).enumerate() {
                    let log_ratio = lt - lo;
                    let active = if advantage >= 0.0 {
                        log_ratio < log_upper
                    } else {
                        log_ratio > log_lower
                    };
                    if active {
                        coeffs[t] += tw * advantage * log_ratio.exp();
                    }
                }
            }
            let mut grad = Gradient::zeros(theta.logits().shape());
            accumulate_group_gradient(&mut grad, group, theta, &coeff);
            grad
        })
        .collect();
    Ok(Gradient::tree_mean(per_group))
}

/// Analytic gradient of the robust objective (risk term, optional jackknife
/// combination, optional baseline, k3 penalty). The infinite-lambda
/// sentinel dispatches to [`grpo_gradient`].
pub fn frpo_gradient(
    groups: &[Group],
    theta: &TabularPolicy,
    old: &TabularPolicy,
    reference: &TabularPolicy,
    cfg: &ObjectiveConfig,
) -> Result<Gradient, ObjectiveError> {
    cfg.validate()?;
    check_policies(groups, theta, old, reference)?;
    let lambda = match cfg.risk.finite() {
        Some(l) => l,
        None => return grpo_gradient(groups, theta, old, reference, cfg),
    };
    let per_group: Vec<Gradient> = groups
        .iter()
        .map(|group| -> Result<Gradient, ObjectiveError> {
            if cfg.use_jackknife && group.len() < 3 {
                return Err(EstimatorError::DegenerateGroup(group.len(), 3).into());
            }
            let stats = GroupStats::compute(
                group,
                theta,
                old,
                cfg.risk,
                cfg.clip,
                cfg.weighting,
                cfg.partition_form,
            )?;
            let log_z = stats.log_partition();
            let loo_log_z: Vec<f64> = if cfg.use_jackknife {
                (0..group.len()).map(|j| stats.log_partition_loo(j)).collect()
            } else {
                Vec::new()
            };
            let g_inv = 1.0 / group.len() as f64;
            let mut coeff = beta_coefficients(group, theta, reference, cfg.beta, cfg.weighting);
            for (i, (traj_stats, coeffs)) in
                stats.trajs.iter().zip(coeff.iter_mut()).enumerate()
            {
                // Multiplier on the clipped-ratio derivative for the risk
                // term: e^{tilt} * [G K_i] in jackknife form, e^{tilt} / Z in
                // plain form, both as exponent differences.
                let u = traj_stats.tilt + match cfg.partition_form {
                    PartitionForm::TokenLevel => 0.0,
                    PartitionForm::TrajectoryLevel => traj_stats.part_dev.ln_1p(),
                } - log_z;
                // risk_scale = e^{tilt(+log inner)} * (1/Z - (1/G) sum_{j != i} 1/Z_{-j})*G
                // one_minus_scale = 1 - risk_scale, computed without cancellation.
                let (risk_scale, one_minus_scale) = if cfg.use_jackknife {
                    let mut scale = u.exp();
                    let mut one_minus = -u.exp_m1();
                    for (j, llz) in loo_log_z.iter().enumerate() {
                        if j == i {
                            continue;
                        }
                        let uj = u + (log_z - llz);
                        // exp(u) - exp(uj) = exp(uj) * expm1(u - uj)
                        let diff = uj.exp() * (llz - log_z).exp_m1();
                        scale += diff;
                        one_minus -= diff;
                    }
                    (scale, one_minus)
                } else {
                    (u.exp(), -u.exp_m1())
                };
                let tw = traj_stats.token_weight * g_inv;
                match cfg.partition_form {
                    PartitionForm::TokenLevel => {
                        for (t, (&lc, &active)) in traj_stats
                            .log_ratios
                            .iter()
                            .zip(&traj_stats.upper_active)
                            .enumerate()
                        {
                            if !active {
                                continue;
                            }
                            let s = lc.exp();
                            if cfg.use_baseline {
                                // lambda * s * (1 - risk_scale), drift-free form.
                                coeffs[t] += tw * lambda * s * one_minus_scale;
                            } else {
                                coeffs[t] -= tw * lambda * s * risk_scale;
                            }
                        }
                    }
                    PartitionForm::TrajectoryLevel => {
                        // d zeta / d logpi_t = zeta for active tokens; the
                        // baseline keeps its token-level form.
                        for (t, &active) in traj_stats.upper_active.iter().enumerate() {
                            if active {
                                coeffs[t] -= g_inv * lambda * risk_scale;
                                if cfg.use_baseline {
                                    coeffs[t] +=
                                        tw * lambda * traj_stats.log_ratios[t].exp();
                                }
                            }
                        }
                    }
                }
            }
            let mut grad = Gradient::zeros(theta.logits().shape());
            accumulate_group_gradient(&mut grad, group, theta, &coeff);
            Ok(grad)
        })
        .collect::<Result<_, _>>()?;
    Ok(Gradient::tree_mean(per_group))
}

/// On-policy wrapper (pi_old = pi_theta, single update per exploration
/// stage): every ratio is exactly 1 and no clip is active.
pub fn grpo_gradient_onpolicy(
    groups: &[Group],
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    cfg: &ObjectiveConfig,
) -> Result<Gradient, ObjectiveError> {
    grpo_gradient(groups, policy, policy, reference, cfg)
}

/// On-policy wrapper for the robust gradient.
pub fn frpo_gradient_onpolicy(
    groups: &[Group],
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    cfg: &ObjectiveConfig,
) -> Result<Gradient, ObjectiveError> {
    frpo_gradient(groups, policy, policy, reference, cfg)
}

/// Outcome of a finite-difference verification pass.
#[derive(Clone, Copy, Debug)]
pub struct FiniteDiffReport {
    /// Max relative error over entries with |analytic| > 1e-8.
    pub max_rel_err: f64,
    /// Mean relative error over those entries.
    pub mean_rel_err: f64,
    /// Number of entries in the relative comparison.
    pub checked_entries: usize,
    /// Max absolute error over the remaining near-zero entries
    /// (absolute threshold 1e-9 applies to these instead).
    pub max_small_abs_err: f64,
    pub small_entries: usize,
}

/// Central finite differences of `objective` against `analytic`, entry by
/// entry. The objective must be a deterministic function of the logits
/// (frozen groups, common random numbers); this is verified by evaluating
/// twice at the base point.
pub fn finite_diff_check<F>(
    objective: F,
    policy: &TabularPolicy,
    analytic: &Gradient,
    step: f64,
) -> Result<FiniteDiffReport, ObjectiveError>
where
    F: Fn(&TabularPolicy) -> Result<f64, ObjectiveError>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(ObjectiveError::InvalidStep(step));
    }
    let base_a = objective(policy)?;
    let base_b = objective(policy)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(ObjectiveError::NonDeterministicObjective(base_a, base_b));
    }
    let mut max_rel: f64 = 0.0;
    let mut sum_rel = 0.0;
    let mut checked = 0usize;
    let mut max_small_abs: f64 = 0.0;
    let mut small = 0usize;
    for k in 0..analytic.shape().len() {
        let mut plus = policy.clone();
        plus.logits_mut().as_mut_slice()[k] += step;
        let mut minus = policy.clone();
        minus.logits_mut().as_mut_slice()[k] -= step;
        let fd = (objective(&plus)? - objective(&minus)?) / (2.0 * step);
        let a = analytic.as_slice()[k];
        if a.abs() > 1e-8 {
            let rel = (fd - a).abs() / a.abs();
            max_rel = max_rel.max(rel);
            sum_rel += rel;
            checked += 1;
        } else {
            max_small_abs = max_small_abs.max((fd - a).abs());
            small += 1;
        }
    }
    Ok(FiniteDiffReport {
        max_rel_err: max_rel,
        mean_rel_err: if checked > 0 {
            sum_rel / checked as f64
        } else {
            0.0
        },
        checked_entries: checked,
        max_small_abs_err: max_small_abs,
        small_entries: small,
    })
}
