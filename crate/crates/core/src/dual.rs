//! Exact verification of the robust inner problem by enumeration: the
//! Gibbs-tilt closed form of the worst case inside an average-KL ball, the
//! one-dimensional dual, the duality gap, entropic risk, and its
//! mean-variance approximation.
//!
//! The primal solver bisects on ln(lambda) using that the KL of the Gibbs
//! tilt decreases monotonically in lambda; the dual solver maximizes the
//! concave dual over a log-spaced grid with golden-section refinement. Both
//! land on the same optimum, which is the duality check the grid tests run.

use crate::env::{
    enumerate_trajectories, EnvError, PromptDist, RewardModel, TabularPolicy,
};
use crate::estimators::Lambda;
use crate::util::log_sum_exp;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DualError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid radius {0}: must be finite and nonnegative")]
    InvalidRadius(f64),
    #[error("bisection on lambda did not converge: KL residual {residual:e} after {iterations} iterations")]
    BisectionNotConverged { residual: f64, iterations: usize },
}

/// The inner minimization instance: base policy, reward, prompt
/// distribution, and the average-KL radius.
#[derive(Clone, Debug)]
pub struct DualInstance {
    pub policy: TabularPolicy,
    pub reward: RewardModel,
    pub prompt_dist: PromptDist,
    pub rho: f64,
}

impl DualInstance {
    pub fn new(
        policy: TabularPolicy,
        reward: RewardModel,
        prompt_dist: PromptDist,
        rho: f64,
    ) -> Result<Self, DualError> {
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(DualError::InvalidRadius(rho));
        }
        if prompt_dist.len() != policy.contexts() {
            return Err(EnvError::ShapeMismatch(
                "prompt distribution does not match policy contexts".into(),
            )
            .into());
        }
        reward.validate().map_err(DualError::Env)?;
        Ok(DualInstance {
            policy,
            reward,
            prompt_dist,
            rho,
        })
    }
}

/// Where the optimal multiplier landed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaStar {
    /// Degenerate limit: mass concentrates on the per-context minimum-reward
    /// sets (radius at least the KL of that limit).
    ZeroPlus,
    Interior(f64),
    /// Risk-neutral limit (radius zero).
    Infinite,
}

impl LambdaStar {
    /// Numeric form for reports: 0, the value, or +inf.
    pub fn as_f64(self) -> f64 {
        match self {
            LambdaStar::ZeroPlus => 0.0,
            LambdaStar::Interior(v) => v,
            LambdaStar::Infinite => f64::INFINITY,
        }
    }
}

/// Solution of the inner problem.
#[derive(Clone, Debug)]
pub struct WorstCaseResult {
    /// Per-context distributions over the enumerated trajectories (in
    /// enumeration order).
    pub q: Vec<Vec<f64>>,
    pub lambda_star: LambdaStar,
    pub primal_value: f64,
    pub kl_attained: f64,
}

/// Enumerated view of one context: log-probabilities and rewards aligned by
/// trajectory index.
#[derive(Clone, Debug)]
struct ContextTable {
    weight: f64,
    log_probs: Vec<f64>,
    rewards: Vec<f64>,
}

fn build_tables(instance: &DualInstance) -> Result<Vec<ContextTable>, DualError> {
    (0..instance.policy.contexts())
        .map(|context| {
            let mut log_probs = Vec::new();
            let mut rewards = Vec::new();
            for (trajectory, _) in enumerate_trajectories(&instance.policy, context)? {
                log_probs.push(instance.policy.trajectory_log_prob(&trajectory));
                rewards.push(instance.reward.evaluate(&trajectory));
            }
            Ok(ContextTable {
                weight: instance.prompt_dist.prob(context),
                log_probs,
                rewards,
            })
        })
        .collect()
}

impl ContextTable {
    /// ln Z(lambda) = ln E_pi[e^{-r/lambda}].
    fn log_z(&self, lambda: f64) -> f64 {
        let logs: Vec<f64> = self
            .log_probs
            .iter()
            .zip(&self.rewards)
            .map(|(lp, r)| lp - r / lambda)
            .collect();
        log_sum_exp(&logs)
    }

    /// Gibbs tilt Q(y) proportional to pi(y) e^{-r(y)/lambda}.
    fn tilt(&self, lambda: Lambda) -> Vec<f64> {
        match lambda {
            Lambda::Infinite => self.log_probs.iter().map(|lp| lp.exp()).collect(),
            Lambda::Finite(l) => {
                let logs: Vec<f64> = self
                    .log_probs
                    .iter()
                    .zip(&self.rewards)
                    .map(|(lp, r)| lp - r / l)
                    .collect();
                let norm = log_sum_exp(&logs);
                logs.iter().map(|lq| (lq - norm).exp()).collect()
            }
        }
    }

    /// KL(Q_lambda || pi) = -E_Q[r]/lambda - ln Z(lambda).
    fn tilt_kl(&self, lambda: f64) -> f64 {
        let q = self.tilt(Lambda::Finite(lambda));
        let mean_r: f64 = q.iter().zip(&self.rewards).map(|(q, r)| q * r).sum();
        (-mean_r / lambda - self.log_z(lambda)).max(0.0)
    }

    fn expected_reward(&self) -> f64 {
        self.log_probs
            .iter()
            .zip(&self.rewards)
            .map(|(lp, r)| lp.exp() * r)
            .sum()
    }

    fn min_reward(&self) -> f64 {
        self.rewards.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Indices achieving the minimum reward (within an absolute tie window).
    fn argmin_set(&self) -> Vec<usize> {
        let min = self.min_reward();
        (0..self.rewards.len())
            .filter(|&i| self.rewards[i] <= min + 1e-12)
            .collect()
    }

    /// The lambda -> 0+ Gibbs limit: pi conditioned on the argmin-reward
    /// set. Ties keep their pi-conditional weights, never an arbitrary pick.
    fn zero_plus_tilt(&self) -> Vec<f64> {
        let set = self.argmin_set();
        let logs: Vec<f64> = set.iter().map(|&i| self.log_probs[i]).collect();
        let norm = log_sum_exp(&logs);
        let mut q = vec![0.0; self.rewards.len()];
        for (&i, lg) in set.iter().zip(&logs) {
            q[i] = (lg - norm).exp();
        }
        q
    }

    /// KL of the zero-plus limit: -ln pi(argmin set).
    fn zero_plus_kl(&self) -> f64 {
        let logs: Vec<f64> = self
            .argmin_set()
            .iter()
            .map(|&i| self.log_probs[i])
            .collect();
        (-log_sum_exp(&logs)).max(0.0)
    }
}

fn average<F: Fn(&ContextTable) -> f64>(tables: &[ContextTable], f: F) -> f64 {
    tables.iter().map(|t| t.weight * f(t)).sum()
}

/// Gibbs tilt Q(y|x) proportional to pi(y|x) e^{-r(x,y)/lambda} for every
/// context, normalized with log-sum-exp. The sentinel returns pi itself.
pub fn gibbs_tilt(instance: &DualInstance, lambda: Lambda) -> Result<Vec<Vec<f64>>, DualError> {
    lambda.validate().map_err(|_| match lambda {
        Lambda::Finite(v) => DualError::InvalidRadius(v),
        Lambda::Infinite => unreachable!("sentinel always validates"),
    })?;
    let tables = build_tables(instance)?;
    Ok(tables.iter().map(|t| t.tilt(lambda)).collect())
}

const BISECT_MAX_ITERATIONS: usize = 200;
const BISECT_KL_TOLERANCE: f64 = 1e-10;

/// Exact worst case inside the average-KL ball, by bisection on ln(lambda)
/// so that the Gibbs tilt attains E_x KL(Q || pi) = rho.
pub fn worst_case_q(instance: &DualInstance) -> Result<WorstCaseResult, DualError> {
    let tables = build_tables(instance)?;
    if instance.rho == 0.0 {
        return Ok(WorstCaseResult {
            q: tables.iter().map(|t| t.tilt(Lambda::Infinite)).collect(),
            lambda_star: LambdaStar::Infinite,
            primal_value: average(&tables, ContextTable::expected_reward),
            kl_attained: 0.0,
        });
    }
    let zero_plus_kl = average(&tables, ContextTable::zero_plus_kl);
    if instance.rho >= zero_plus_kl - 1e-12 {
        return Ok(WorstCaseResult {
            q: tables.iter().map(|t| t.zero_plus_tilt()).collect(),
            lambda_star: LambdaStar::ZeroPlus,
            primal_value: average(&tables, ContextTable::min_reward),
            kl_attained: zero_plus_kl,
        });
    }

    let avg_kl = |lambda: f64| average(&tables, |t| t.tilt_kl(lambda));

    // KL is monotone decreasing in lambda; bracket the root in log space,
    // expanding if the default bracket does not straddle rho.
    let mut lo = 1e-8f64.ln();
    let mut hi = 1e8f64.ln();
    let mut expansions = 0;
    while avg_kl(lo.exp()) < instance.rho && expansions < 16 {
        lo -= 8.0;
        expansions += 1;
    }
    while avg_kl(hi.exp()) > instance.rho && expansions < 32 {
        hi += 8.0;
        expansions += 1;
    }

    let mut lambda = ((lo + hi) / 2.0).exp();
    let mut residual = f64::INFINITY;
    for iteration in 0..BISECT_MAX_ITERATIONS {
        let mid = (lo + hi) / 2.0;
        lambda = mid.exp();
        let kl = avg_kl(lambda);
        residual = (kl - instance.rho).abs();
        if residual < BISECT_KL_TOLERANCE {
            break;
        }
        if kl > instance.rho {
            lo = mid;
        } else {
            hi = mid;
        }
        if iteration + 1 == BISECT_MAX_ITERATIONS {
            return Err(DualError::BisectionNotConverged {
                residual,
                iterations: BISECT_MAX_ITERATIONS,
            });
        }
    }

    let q: Vec<Vec<f64>> = tables
        .iter()
        .map(|t| t.tilt(Lambda::Finite(lambda)))
        .collect();
    let primal_value = tables
        .iter()
        .zip(&q)
        .map(|(t, q)| {
            t.weight
                * q.iter()
                    .zip(&t.rewards)
                    .map(|(q, r)| q * r)
                    .sum::<f64>()
        })
        .sum();
    Ok(WorstCaseResult {
        q,
        lambda_star: LambdaStar::Interior(lambda),
        primal_value,
        kl_attained: avg_kl(lambda),
    })
}

/// Dual objective g(lambda) = -E_x[lambda ln Z(x)] - lambda rho.
fn dual_objective(tables: &[ContextTable], rho: f64, lambda: f64) -> f64 {
    -lambda * average(tables, |t| t.log_z(lambda)) - lambda * rho
}

/// Maximizes the concave dual over lambda >= 0.
///
/// Radius zero short-circuits to the risk-neutral limit E[r]. Otherwise a
/// log-spaced grid over [1e-4, 1e4] (expanded when the maximum sits on the
/// edge) brackets the peak and golden-section refines it to a relative
/// lambda accuracy of 1e-8; the lambda -> 0+ boundary value E[min r] is an
/// explicit candidate.
pub fn dual_value(instance: &DualInstance) -> Result<(f64, LambdaStar), DualError> {
    let tables = build_tables(instance)?;
    if instance.rho == 0.0 {
        return Ok((
            average(&tables, ContextTable::expected_reward),
            LambdaStar::Infinite,
        ));
    }

    let g = |lambda: f64| dual_objective(&tables, instance.rho, lambda);

    let mut log_lo = 1e-4f64.ln();
    let mut log_hi = 1e4f64.ln();
    let (bracket_lo, bracket_hi) = loop {
        const POINTS: usize = 97;
        let step = (log_hi - log_lo) / (POINTS - 1) as f64;
        let values: Vec<f64> = (0..POINTS).map(|i| g((log_lo + i as f64 * step).exp())).collect();
        let best = values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite dual values"))
            .map(|(i, _)| i)
            .expect("nonempty grid");
        if best == 0 && log_lo > 1e-8f64.ln() {
            log_lo -= 8.0;
        } else if best + 1 == POINTS && log_hi < 1e8f64.ln() {
            log_hi += 8.0;
        } else {
            let lo = log_lo + step * best.saturating_sub(1) as f64;
            let hi = log_lo + step * (best + 1).min(POINTS - 1) as f64;
            break (lo, hi);
        }
    };

    // Golden-section on ln(lambda); the dual is concave in lambda, hence
    // unimodal in the log reparameterization.
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut a = bracket_lo;
    let mut b = bracket_hi;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut gc = g(c.exp());
    let mut gd = g(d.exp());
    while (b - a).abs() > 1e-8 {
        if gc > gd {
            b = d;
            d = c;
            gd = gc;
            c = b - inv_phi * (b - a);
            gc = g(c.exp());
        } else {
            a = c;
            c = d;
            gc = gd;
            d = a + inv_phi * (b - a);
            gd = g(d.exp());
        }
    }
    let lambda_interior = ((a + b) / 2.0).exp();
    let interior_value = g(lambda_interior);

    // lambda -> 0+ boundary: -lambda ln Z -> min r and the penalty vanishes.
    let zero_value = average(&tables, ContextTable::min_reward);
    if zero_value >= interior_value {
        Ok((zero_value, LambdaStar::ZeroPlus))
    } else {
        Ok((interior_value, LambdaStar::Interior(lambda_interior)))
    }
}

/// |primal - dual| for one instance.
pub fn duality_gap(instance: &DualInstance) -> Result<f64, DualError> {
    let primal = worst_case_q(instance)?.primal_value;
    let (dual, _) = dual_value(instance)?;
    Ok((primal - dual).abs())
}

/// Exact entropic risk E_x[-lambda ln E_{y~pi}(e^{-r/lambda})], with the
/// sentinel dispatching to the plain expected reward.
pub fn entropic_risk_exact(
    policy: &TabularPolicy,
    reward: &RewardModel,
    lambda: Lambda,
    prompts: &PromptDist,
) -> Result<f64, DualError> {
    let instance = DualInstance::new(policy.clone(), reward.clone(), prompts.clone(), 0.0)?;
    let tables = build_tables(&instance)?;
    match lambda {
        Lambda::Infinite => Ok(average(&tables, ContextTable::expected_reward)),
        Lambda::Finite(l) => Ok(average(&tables, |t| -l * t.log_z(l))),
    }
}

/// Exact entropic risk next to its large-lambda approximation
/// E[r] - E_x[Var(r | x)] / (2 lambda).
#[derive(Clone, Copy, Debug)]
pub struct MeanVarianceReport {
    pub exact: f64,
    pub approx: f64,
    pub abs_err: f64,
}

pub fn mean_variance_report(
    policy: &TabularPolicy,
    reward: &RewardModel,
    lambda: f64,
    prompts: &PromptDist,
) -> Result<MeanVarianceReport, DualError> {
    let exact = entropic_risk_exact(policy, reward, Lambda::Finite(lambda), prompts)?;
    let instance = DualInstance::new(policy.clone(), reward.clone(), prompts.clone(), 0.0)?;
    let tables = build_tables(&instance)?;
    let mean = average(&tables, ContextTable::expected_reward);
    let mean_conditional_variance = average(&tables, |t| {
        let m = t.expected_reward();
        t.log_probs
            .iter()
            .zip(&t.rewards)
            .map(|(lp, r)| lp.exp() * (r - m) * (r - m))
            .sum()
    });
    let approx = mean - mean_conditional_variance / (2.0 * lambda);
    Ok(MeanVarianceReport {
        exact,
        approx,
        abs_err: (exact - approx).abs(),
    })
}
