//! First-order-Markov tabular softmax policy.
//!
//! Next-token logits are indexed by (context, position, previous token); the
//! trajectory probability is the product of per-step softmax probabilities.
//! Everything downstream (estimators, dual oracle, trainer) reduces to exact
//! sums over the trajectories this module enumerates.

use crate::env::base::{EnvError, PromptDist, Trajectory, VocabSpec};
use crate::logits::{LogitShape, LogitTensor};
use crate::rng::Stream;
use crate::util::log_sum_exp;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    vocab: VocabSpec,
    logits: LogitTensor,
}

impl TabularPolicy {
    /// Shape used for a policy over `contexts` contexts under `vocab`.
    pub fn shape_for(vocab: &VocabSpec, contexts: usize) -> LogitShape {
        LogitShape {
            contexts,
            positions: vocab.max_len,
            prev: vocab.vocab_size + 1,
            vocab: vocab.vocab_size,
        }
    }

    /// Uniform policy (all-zero logits).
    pub fn uniform(vocab: VocabSpec, contexts: usize) -> Result<Self, EnvError> {
        vocab.validate()?;
        if contexts == 0 {
            return Err(EnvError::ShapeMismatch("zero contexts".into()));
        }
        let shape = Self::shape_for(&vocab, contexts);
        Ok(TabularPolicy {
            vocab,
            logits: LogitTensor::zeros(shape),
        })
    }

    /// Policy with i.i.d. normal logits of the given scale.
    pub fn random(
        vocab: VocabSpec,
        contexts: usize,
        seed: u64,
        scale: f64,
    ) -> Result<Self, EnvError> {
        let mut policy = Self::uniform(vocab, contexts)?;
        let mut stream = Stream::derived(seed, &[0x706f_6c69]);
        for v in policy.logits.as_mut_slice() {
            *v = scale * stream.normal();
        }
        Ok(policy)
    }

    pub fn from_logits(vocab: VocabSpec, logits: LogitTensor) -> Result<Self, EnvError> {
        vocab.validate()?;
        let expect = Self::shape_for(&vocab, logits.shape().contexts);
        if logits.shape() != expect {
            return Err(EnvError::ShapeMismatch(format!(
                "logit shape {:?} does not match vocabulary {:?}",
                logits.shape(),
                expect
            )));
        }
        if !logits.all_finite() {
            return Err(EnvError::NonFiniteInput("logits".into()));
        }
        Ok(TabularPolicy { vocab, logits })
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }

    pub fn contexts(&self) -> usize {
        self.logits.shape().contexts
    }

    pub fn logits(&self) -> &LogitTensor {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut LogitTensor {
        &mut self.logits
    }

    /// True when both policies share vocabulary and context count.
    pub fn same_shape(&self, other: &TabularPolicy) -> bool {
        self.vocab == other.vocab && self.logits.shape() == other.logits.shape()
    }

    /// Previous-token index for position `t` of a trajectory (BOS at t = 0).
    #[inline]
    fn prev_index(&self, tokens: &[usize], t: usize) -> usize {
        if t == 0 {
            self.vocab.bos_index()
        } else {
            tokens[t - 1]
        }
    }

    /// Log-softmax of one conditional row.
    pub fn log_prob_row(&self, context: usize, position: usize, prev: usize) -> Vec<f64> {
        let row = self.logits.row(context, position, prev);
        let norm = log_sum_exp(row);
        row.iter().map(|l| l - norm).collect()
    }

    /// Softmax probabilities of one conditional row.
    pub fn prob_row(&self, context: usize, position: usize, prev: usize) -> Vec<f64> {
        self.log_prob_row(context, position, prev)
            .into_iter()
            .map(f64::exp)
            .collect()
    }

    /// Log-probability of a single token at (context, position, prev).
    pub fn token_log_prob(
        &self,
        context: usize,
        position: usize,
        prev: usize,
        token: usize,
    ) -> f64 {
        let row = self.logits.row(context, position, prev);
        row[token] - log_sum_exp(row)
    }

    /// Log-probability of a whole trajectory.
    pub fn trajectory_log_prob(&self, trajectory: &Trajectory) -> f64 {
        let mut total = 0.0;
        for (t, &token) in trajectory.tokens.iter().enumerate() {
            let prev = self.prev_index(&trajectory.tokens, t);
            total += self.token_log_prob(trajectory.context, t, prev, token);
        }
        total
    }

    /// Per-token log-probabilities along a trajectory.
    pub fn step_log_probs(&self, trajectory: &Trajectory) -> Vec<f64> {
        trajectory
            .tokens
            .iter()
            .enumerate()
            .map(|(t, &token)| {
                let prev = self.prev_index(&trajectory.tokens, t);
                self.token_log_prob(trajectory.context, t, prev, token)
            })
            .collect()
    }

    /// Samples one trajectory from the autoregressive policy.
    pub fn sample_trajectory(&self, context: usize, stream: &mut Stream) -> Trajectory {
        let mut tokens = Vec::with_capacity(self.vocab.max_len);
        let mut prev = self.vocab.bos_index();
        for t in 0..self.vocab.max_len {
            let probs = self.prob_row(context, t, prev);
            let token = stream.categorical(&probs);
            tokens.push(token);
            if token == self.vocab.eos_token {
                break;
            }
            prev = token;
        }
        Trajectory { context, tokens }
    }
}

/// Exhaustively enumerates every trajectory of `policy` for one context,
/// paired with its exact probability. Probabilities sum to 1 up to rounding.
pub fn enumerate_trajectories(
    policy: &TabularPolicy,
    context: usize,
) -> Result<Vec<(Trajectory, f64)>, EnvError> {
    policy.vocab.check_enumerable()?;
    if context >= policy.contexts() {
        return Err(EnvError::ShapeMismatch(format!(
            "context {context} out of range (have {})",
            policy.contexts()
        )));
    }
    let vocab = policy.vocab;
    let mut out = Vec::new();
    let mut prefix: Vec<usize> = Vec::with_capacity(vocab.max_len);

    fn recurse(
        policy: &TabularPolicy,
        context: usize,
        prefix: &mut Vec<usize>,
        log_prob: f64,
        out: &mut Vec<(Trajectory, f64)>,
    ) {
        let vocab = policy.vocab;
        let t = prefix.len();
        let prev = if t == 0 {
            vocab.bos_index()
        } else {
            prefix[t - 1]
        };
        let log_row = policy.log_prob_row(context, t, prev);
        for (token, lp) in log_row.iter().enumerate() {
            prefix.push(token);
            let total = log_prob + lp;
            if token == vocab.eos_token || prefix.len() == vocab.max_len {
                out.push((
                    Trajectory {
                        context,
                        tokens: prefix.clone(),
                    },
                    total.exp(),
                ));
            } else {
                recurse(policy, context, prefix, total, out);
            }
            prefix.pop();
        }
    }

    recurse(policy, context, &mut prefix, 0.0, &mut out);
    Ok(out)
}

/// Exact sequence-level KL(a || b), averaged over the prompt distribution.
///
/// Both policies must share vocabulary and context count; tabular softmax
/// policies are strictly positive, so the divergence is always finite.
pub fn exact_kl(
    policy_a: &TabularPolicy,
    policy_b: &TabularPolicy,
    prompts: &PromptDist,
) -> Result<f64, EnvError> {
    if !policy_a.same_shape(policy_b) {
        return Err(EnvError::ShapeMismatch(
            "policies differ in vocabulary or context count".into(),
        ));
    }
    if prompts.len() != policy_a.contexts() {
        return Err(EnvError::ShapeMismatch(format!(
            "prompt distribution over {} contexts, policies have {}",
            prompts.len(),
            policy_a.contexts()
        )));
    }
    let mut total = 0.0;
    for context in 0..policy_a.contexts() {
        let weight = prompts.prob(context);
        if weight == 0.0 {
            continue;
        }
        let mut kl = 0.0;
        for (trajectory, prob) in enumerate_trajectories(policy_a, context)? {
            if prob == 0.0 {
                continue;
            }
            let log_a = policy_a.trajectory_log_prob(&trajectory);
            let log_b = policy_b.trajectory_log_prob(&trajectory);
            kl += prob * (log_a - log_b);
        }
        total += weight * kl;
    }
    Ok(total)
}

/// Exact trajectory-distribution entropy, averaged over the prompt
/// distribution.
pub fn trajectory_entropy(
    policy: &TabularPolicy,
    prompts: &PromptDist,
) -> Result<f64, EnvError> {
    if prompts.len() != policy.contexts() {
        return Err(EnvError::ShapeMismatch(format!(
            "prompt distribution over {} contexts, policy has {}",
            prompts.len(),
            policy.contexts()
        )));
    }
    let mut total = 0.0;
    for context in 0..policy.contexts() {
        let weight = prompts.prob(context);
        if weight == 0.0 {
            continue;
        }
        let mut entropy = 0.0;
        for (trajectory, prob) in enumerate_trajectories(policy, context)? {
            if prob > 0.0 {
                entropy -= prob * policy.trajectory_log_prob(&trajectory);
            }
        }
        total += weight * entropy;
    }
    Ok(total)
}

/// Exact expected reward E_{x ~ p} E_{y ~ policy(.|x)} [r(x, y)].
pub fn expected_reward(
    policy: &TabularPolicy,
    reward: &crate::env::reward::RewardModel,
    prompts: &PromptDist,
) -> Result<f64, EnvError> {
    if prompts.len() != policy.contexts() {
        return Err(EnvError::ShapeMismatch(
            "prompt distribution does not match policy contexts".into(),
        ));
    }
    let mut total = 0.0;
    for context in 0..policy.contexts() {
        let weight = prompts.prob(context);
        if weight == 0.0 {
            continue;
        }
        let mut value = 0.0;
        for (trajectory, prob) in enumerate_trajectories(policy, context)? {
            value += prob * reward.evaluate(&trajectory);
        }
        total += weight * value;
    }
    Ok(total)
}
