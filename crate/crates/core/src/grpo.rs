//! Group relative policy optimization.
//!
//! For every query a group of outputs is sampled from the previous policy
//! θ_old and scored with format and accuracy rewards. Rewards are
//! standardized within the group, and the loss
//!
//! ```text
//! −(1/G) Σᵢ [ min(ρᵢ·Aᵢ, clip(ρᵢ, 1−ε, 1+ε)·Aᵢ) − β·(κᵢ − ln κᵢ − 1) ]
//! ```
//!
//! with `ρᵢ = π_θ(oᵢ|q) / π_θold(oᵢ|q)` and `κᵢ = π_ref(oᵢ|q) / π_θ(oᵢ|q)`
//! is minimized by plain gradient descent on the trainable parameters.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{accuracy_reward, format_reward, parse_output};
use crate::numerics::{ComputeGraph, NodeId, NumericsError, Tensor};
use crate::policy::{Conditioning, Policy, PolicyError, PolicySample, Snapshot, SnapshotTag};
use crate::Label;

/// Bounds applied to the reference ratio κ before the penalty formula.
pub const KL_RATIO_MIN: f64 = 1e-8;
pub const KL_RATIO_MAX: f64 = 1e8;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid grpo config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub epsilon: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub sigma_floor: f64,
    pub steps_per_old_refresh: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Queries per update.
    pub batch_size: usize,
    /// Rescale the summed gradient to at most this norm before the update.
    pub max_grad_norm: Option<f64>,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            epsilon: 0.2,
            beta: 0.04,
            learning_rate: 1e-2,
            sigma_floor: 1e-6,
            steps_per_old_refresh: 1,
            temperature: 1.0,
            seed: 0,
            batch_size: 4,
            max_grad_norm: None,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be non-negative");
        }
        if !(self.sigma_floor > 0.0) {
            return bad("sigma_floor must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be non-negative");
        }
        if self.steps_per_old_refresh == 0 || self.batch_size == 0 {
            return bad("refresh cadence and batch size must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("sampling temperature must be positive");
        }
        if matches!(self.max_grad_norm, Some(c) if !(c > 0.0)) {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub accuracy: f64,
    pub format: f64,
}

impl RewardBreakdown {
    pub fn total(&self) -> f64 {
        self.accuracy + self.format
    }
}

/// Scores rendered outputs against the gold label.
pub fn compute_rewards(texts: &[String], gold: Label) -> Vec<RewardBreakdown> {
    texts
        .iter()
        .map(|t| RewardBreakdown {
            accuracy: accuracy_reward(&parse_output(t), gold),
            format: format_reward(t),
        })
        .collect()
}

/// `(rᵢ − μ)/σ` with the population standard deviation; all zeros when
/// `σ ≤ sigma_floor`.
pub fn normalize_advantages(rewards: &[f64], sigma_floor: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mu = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if sigma <= sigma_floor {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mu) / sigma).collect()
    }
}

fn kl_log_ratio(logprob_theta: f64, logprob_ref: f64) -> f64 {
    (logprob_ref - logprob_theta).clamp(KL_RATIO_MIN.ln(), KL_RATIO_MAX.ln())
}

/// `κ − ln κ − 1` with `κ = exp(logprob_ref − logprob_theta)`, clamped.
pub fn kl_penalty(logprob_theta: f64, logprob_ref: f64) -> f64 {
    let log_k = kl_log_ratio(logprob_theta, logprob_ref);
    log_k.exp_m1() - log_k
}

/// `min(ρ·A, clip(ρ, 1−ε, 1+ε)·A)` with `ρ = exp(logprob_theta − logprob_old)`.
pub fn clipped_term(logprob_theta: f64, logprob_old: f64, advantage: f64, epsilon: f64) -> f64 {
    let ratio = (logprob_theta - logprob_old).exp();
    (ratio * advantage).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage)
}

/// One query's sampled group with its scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub image_id: usize,
    pub prompt: Vec<usize>,
    pub samples: Vec<PolicySample>,
    pub rewards: Vec<f64>,
    pub breakdown: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

impl GroupRollout {
    pub fn old_logprobs(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.total_logprob).collect()
    }

    pub fn sequences(&self) -> Vec<Vec<usize>> {
        self.samples.iter().map(|s| s.tokens.clone()).collect()
    }
}

/// Everything needed to train on one image-prompt pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainQuery {
    pub image_id: usize,
    /// Patch features from the fixed stem.
    pub features: Tensor,
    pub prompt: Vec<usize>,
    /// Output of the frozen prompt reader for `prompt`.
    pub prompt_feature: Tensor,
    pub gold: Label,
}

impl TrainQuery {
    pub fn new(policy: &Policy, image_id: usize, features: Tensor, prompt: Vec<usize>, gold: Label) -> Result<Self, GrpoError> {
        let prompt_feature = policy.prompt_feature(&prompt)?;
        Ok(Self {
            image_id,
            features,
            prompt,
            prompt_feature,
            gold,
        })
    }

    pub fn conditioning(&self, policy: &Policy) -> Result<Conditioning, GrpoError> {
        Ok(Conditioning {
            image: policy.encode_features(&self.features)?.cls,
            prompt: self.prompt_feature.clone(),
        })
    }
}

/// Samples a group from `old` and scores it.
pub fn rollout_group(
    old: &Snapshot,
    query: &TrainQuery,
    config: &GrpoConfig,
    seed: u64,
) -> Result<GroupRollout, GrpoError> {
    let cond = query.conditioning(old)?;
    let samples = old.sample_group(&cond, config.group_size, config.temperature, seed)?;
    let vocab = old.vocabulary();
    let texts = samples
        .iter()
        .map(|s| vocab.render(&s.tokens))
        .collect::<Result<Vec<_>, _>>()?;
    let breakdown = compute_rewards(&texts, query.gold);
    let rewards: Vec<f64> = breakdown.iter().map(RewardBreakdown::total).collect();
    let advantages = normalize_advantages(&rewards, config.sigma_floor);
    Ok(GroupRollout {
        image_id: query.image_id,
        prompt: query.prompt.clone(),
        samples,
        rewards,
        breakdown,
        advantages,
    })
}

/// Graph nodes and side values of the objective for one group.
#[derive(Clone, Debug)]
pub struct ObjectiveParts {
    /// Scalar loss node, already divided by the group size.
    pub loss: NodeId,
    pub ratios: Vec<f64>,
    pub kl: Vec<f64>,
}

/// Builds the loss on top of a `G × 1` node of current log-probabilities.
/// Gradients flow only through `logprobs`.
pub fn objective_graph(
    g: &mut ComputeGraph,
    logprobs: NodeId,
    old: &[f64],
    reference: &[f64],
    advantages: &[f64],
    epsilon: f64,
    beta: f64,
) -> Result<ObjectiveParts, GrpoError> {
    let n = advantages.len();
    if g.value(logprobs).dims2() != (n, 1) || old.len() != n || reference.len() != n {
        return Err(GrpoError::Config("group arrays disagree in length".into()));
    }
    let old_c = g.constant(Tensor::column(old.to_vec()));
    let ref_c = g.constant(Tensor::column(reference.to_vec()));
    let adv = g.constant(Tensor::column(advantages.to_vec()));

    let log_ratio = g.sub(logprobs, old_c)?;
    let ratio = g.exp(log_ratio);
    let plain = g.mul(ratio, adv)?;
    let clipped = g.clip(ratio, 1.0 - epsilon, 1.0 + epsilon);
    let clipped = g.mul(clipped, adv)?;
    let surrogate = g.minimum(plain, clipped)?;

    let log_k = g.sub(ref_c, logprobs)?;
    let log_k = g.clip(log_k, KL_RATIO_MIN.ln(), KL_RATIO_MAX.ln());
    let k = g.exp(log_k);
    let kl = g.sub(k, log_k)?;
    let one = g.constant(Tensor::scalar(1.0));
    let kl = g.sub(kl, one)?;

    let weighted_kl = g.scale(kl, beta);
    let per_sample = g.sub(surrogate, weighted_kl)?;
    let total = g.sum(per_sample)?;
    let loss = g.scale(total, -1.0 / n as f64);
    Ok(ObjectiveParts {
        loss,
        ratios: g.value(ratio).data().to_vec(),
        kl: g.value(kl).data().to_vec(),
    })
}

/// Loss value, named gradients and side values for one group.
#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
    pub ratios: Vec<f64>,
    pub kl: Vec<f64>,
}

/// Evaluates the objective of `group` under `policy` and differentiates it
/// with respect to the trainable parameters.
pub fn grpo_objective(
    policy: &Policy,
    group: &GroupRollout,
    query: &TrainQuery,
    reference_logprobs: &[f64],
    config: &GrpoConfig,
) -> Result<ObjectiveValue, GrpoError> {
    let mut g = ComputeGraph::new();
    let b = policy.bind(&mut g, true);
    let (img, _, _) = policy.encode_graph(&mut g, &b, &query.features)?;
    let pf = g.constant(query.prompt_feature.clone());
    let lp = policy.sequence_logprobs_graph(&mut g, &b, img, pf, &group.sequences())?;
    let parts = objective_graph(
        &mut g,
        lp,
        &group.old_logprobs(),
        reference_logprobs,
        &group.advantages,
        config.epsilon,
        config.beta,
    )?;
    let grads = g.backward(parts.loss)?;
    Ok(ObjectiveValue {
        loss: g.scalar_value(parts.loss),
        grads: b.trainable().map(|(n, id)| (n.to_string(), grads.get(id))).collect(),
        ratios: parts.ratios,
        kl: parts.kl,
    })
}

/// Log-probabilities of each sample under `reference`.
pub fn reference_logprobs(reference: &Policy, query: &TrainQuery, group: &GroupRollout) -> Result<Vec<f64>, GrpoError> {
    let cond = query.conditioning(reference)?;
    group
        .samples
        .iter()
        .map(|s| Ok(reference.sequence_logprob(&cond, &s.tokens)?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_abs_adv: f64,
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub loss: f64,
    /// Norm of the batch gradient before any rescaling.
    pub grad_norm: f64,
    pub update_norm: f64,
    pub format_rate: f64,
    /// Set when the gradient was non-finite and no update was applied.
    pub aborted: bool,
}

/// Owns the policy under training together with its θ_old and reference
/// snapshots.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: GrpoConfig,
    policy: Policy,
    old: Snapshot,
    reference: Snapshot,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    /// Takes the reference snapshot from `policy` as it is now.
    pub fn new(policy: Policy, config: GrpoConfig) -> Result<Self, GrpoError> {
        config.validate()?;
        Ok(Self {
            old: policy.snapshot(SnapshotTag::Old),
            reference: policy.snapshot(SnapshotTag::Ref),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            policy,
            config,
            step: 0,
        })
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn into_policy(self) -> Policy {
        self.policy
    }

    pub fn reference(&self) -> &Snapshot {
        &self.reference
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update over `batch`; see [`train_step`].
    pub fn step(&mut self, batch: &[&TrainQuery]) -> Result<StepMetrics, GrpoError> {
        if self.step.is_multiple_of(self.config.steps_per_old_refresh) {
            self.old = self.policy.snapshot(SnapshotTag::Old);
        }
        let metrics = train_step(
            &mut self.policy,
            &self.old,
            &self.reference,
            batch,
            &self.config,
            &mut self.rng,
            self.step,
        )?;
        self.step += 1;
        Ok(metrics)
    }
}

/// Samples and scores a group per query under `old`, averages the group
/// objectives and applies one gradient-descent update to `policy`.
pub fn train_step(
    policy: &mut Policy,
    old: &Snapshot,
    reference: &Snapshot,
    batch: &[&TrainQuery],
    config: &GrpoConfig,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<StepMetrics, GrpoError> {
    if batch.is_empty() {
        return Err(GrpoError::Config("empty batch".into()));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
    let (mut reward, mut abs_adv, mut clip, mut kl, mut loss, mut fmt) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut samples = 0.0;
    for query in batch {
        let seed = rng.gen::<u64>();
        let group = rollout_group(old, query, config, seed)?;
        let ref_lp = reference_logprobs(reference, query, &group)?;
        let value = grpo_objective(policy, &group, query, &ref_lp, config)?;
        for (name, grad) in value.grads {
            let g = grad.scale(inv_b);
            let entry = total.entry(name);
            match entry {
                std::collections::btree_map::Entry::Vacant(v) => {
                    v.insert(g);
                }
                std::collections::btree_map::Entry::Occupied(mut o) => {
                    let sum = o.get().zip_with(&g, |a, b| a + b)?;
                    o.insert(sum);
                }
            }
        }
        loss += value.loss * inv_b;
        for i in 0..group.samples.len() {
            let a = group.advantages[i];
            let r = value.ratios[i];
            if (a > 0.0 && r > 1.0 + config.epsilon) || (a < 0.0 && r < 1.0 - config.epsilon) {
                clip += 1.0;
            }
            reward += group.rewards[i];
            abs_adv += a.abs();
            kl += value.kl[i];
            fmt += group.breakdown[i].format;
            samples += 1.0;
        }
    }
    let grad_norm = total.values().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    let aborted = !grad_norm.is_finite();
    let mut update_norm = 0.0;
    if !aborted {
        let scale = match config.max_grad_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let step_size = config.learning_rate * scale;
        policy.apply_update(&total, step_size)?;
        update_norm = step_size * grad_norm;
    }
    Ok(StepMetrics {
        step,
        mean_reward: reward / samples,
        mean_abs_adv: abs_adv / samples,
        clip_fraction: clip / samples,
        mean_kl: kl / samples,
        loss,
        grad_norm,
        update_norm,
        format_rate: fmt / samples,
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};
    use crate::policy::{PolicyConfig, INSTRUCTION};
    use crate::GrayImage;
    use proptest::prelude::*;

    #[test]
    fn reward_cases() {
        let texts = vec![
            "<think>a</think><answer>FAKE</answer>".to_string(),
            "<think>a</think><answer>REAL</answer>".to_string(),
            "<answer>FAKE</answer>".to_string(),
        ];
        let r: Vec<f64> = compute_rewards(&texts, Label::Fake).iter().map(RewardBreakdown::total).collect();
        assert_eq!(r, vec![2.0, 1.0, 0.0]);
    }

    #[test]
    fn advantage_cases() {
        assert_eq!(normalize_advantages(&[1.0, 1.0, 1.0, 1.0], 1e-6), vec![0.0; 4]);
        let a = normalize_advantages(&[2.0, 0.0, 1.0, 1.0], 1e-6);
        let s = 2.0f64.sqrt();
        for (x, y) in a.iter().zip([s, -s, 0.0, 0.0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_and_clip_values() {
        assert_eq!(kl_penalty(-3.0, -3.0), 0.0);
        let two = kl_penalty(0.0, 2.0f64.ln());
        assert!((two - (1.0 - 2.0f64.ln())).abs() < 1e-12);
        let half = kl_penalty(0.0, 0.5f64.ln());
        assert!((half - (2.0f64.ln() - 0.5)).abs() < 1e-12);
        assert!((clipped_term(1.5f64.ln(), 0.0, 1.0, 0.2) - 1.2).abs() < 1e-12);
        assert!((clipped_term(0.5f64.ln(), 0.0, -1.0, 0.2) + 0.8).abs() < 1e-12);
        assert_eq!(clipped_term(3.0, 0.0, 0.0, 0.2), 0.0);
        assert!(kl_penalty(0.0, 1e6).is_finite());
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        for bad in [
            GrpoConfig { group_size: 1, ..GrpoConfig::default() },
            GrpoConfig { epsilon: 1.0, ..GrpoConfig::default() },
            GrpoConfig { beta: -1.0, ..GrpoConfig::default() },
            GrpoConfig { sigma_floor: 0.0, ..GrpoConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn setup(seed: u64) -> (Policy, TrainQuery) {
        let policy = Policy::new(PolicyConfig::default(), seed).unwrap();
        let px = (0..1024).map(|i| 0.3 + 0.4 * ((i * 37 % 101) as f64 / 101.0)).collect();
        let img = GrayImage::new(32, 32, px).unwrap();
        let feats = policy.features(&img).unwrap();
        let prompt = policy.build_prompt(INSTRUCTION, None).unwrap();
        let q = TrainQuery::new(&policy, 0, feats, prompt, Label::Fake).unwrap();
        (policy, q)
    }

    fn forced_group(policy: &Policy, q: &TrainQuery) -> GroupRollout {
        let cfg = GrpoConfig::default();
        let mut group = rollout_group(&policy.snapshot(SnapshotTag::Old), q, &cfg, 9).unwrap();
        // Make the rewards informative regardless of what was sampled.
        group.rewards = vec![2.0, 0.0, 1.0, 1.0, 2.0, 1.0, 0.0, 2.0];
        group.advantages = normalize_advantages(&group.rewards, cfg.sigma_floor);
        group
    }

    #[test]
    fn step_zero_loss_is_null_and_gradient_is_surrogate() {
        let (policy, q) = setup(1);
        let group = forced_group(&policy, &q);
        let ref_lp = reference_logprobs(&policy, &q, &group).unwrap();
        let cfg = GrpoConfig::default();
        let v = grpo_objective(&policy, &group, &q, &ref_lp, &cfg).unwrap();
        assert!(v.loss.abs() < 1e-10);
        assert!(v.kl.iter().all(|&k| k.abs() < 1e-12));

        // −(1/G) Σ Aᵢ·logπ(oᵢ) has the same gradient at this point.
        let surrogate = |p: &Policy| {
            let cond = q.conditioning(p).unwrap();
            let g = group.samples.len() as f64;
            -group
                .samples
                .iter()
                .zip(&group.advantages)
                .map(|(s, a)| a * p.sequence_logprob(&cond, &s.tokens).unwrap())
                .sum::<f64>()
                / g
        };
        for name in ["lora.out.down", "enc.embed.b"] {
            let x = policy.param(name).unwrap().clone();
            let fd = finite_diff_grad(
                |v| {
                    let mut p = policy.clone();
                    p.set_trainable(name, v.clone()).unwrap();
                    surrogate(&p)
                },
                &x,
                1e-5,
            );
            let err = relative_error(&v.grads[name], &fd, 1e-8);
            assert!(err < 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn full_objective_gradient_off_policy() {
        let (mut policy, q) = setup(2);
        let group = forced_group(&policy, &q);
        let ref_lp: Vec<f64> = reference_logprobs(&policy, &q, &group)
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.3 * (i as f64 - 3.5))
            .collect();
        // Move θ away from θ_old so ratios and KL are non-trivial.
        let grads: BTreeMap<String, Tensor> = policy
            .trainable_parameters()
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::filled(t.rows(), t.cols(), 0.05)))
            .collect();
        policy.apply_update(&grads, 1.0).unwrap();
        let cfg = GrpoConfig::default();
        let v = grpo_objective(&policy, &group, &q, &ref_lp, &cfg).unwrap();
        assert!(v.ratios.iter().any(|r| (r - 1.0).abs() > 1e-3));
        for name in ["lora.in.up", "enc.l0.h0.wk"] {
            let x = policy.param(name).unwrap().clone();
            let fd = finite_diff_grad(
                |t| {
                    let mut p = policy.clone();
                    p.set_trainable(name, t.clone()).unwrap();
                    grpo_objective(&p, &group, &q, &ref_lp, &cfg).unwrap().loss
                },
                &x,
                1e-5,
            );
            let err = relative_error(&v.grads[name], &fd, 1e-8);
            assert!(err < 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn equal_rewards_leave_pure_kl() {
        let (policy, q) = setup(3);
        let cfg = GrpoConfig::default();
        let mut group = forced_group(&policy, &q);
        group.rewards = vec![1.0; 8];
        group.advantages = normalize_advantages(&group.rewards, cfg.sigma_floor);
        let ref_lp: Vec<f64> = group.old_logprobs().iter().map(|v| v - 0.5).collect();
        let v = grpo_objective(&policy, &group, &q, &ref_lp, &cfg).unwrap();
        let expect = cfg.beta / 8.0 * v.kl.iter().sum::<f64>();
        assert!((v.loss - expect).abs() < 1e-12);
        assert!(v.kl.iter().all(|&k| (k - kl_penalty(0.0, -0.5)).abs() < 1e-9));
    }

    fn run(cfg: GrpoConfig, steps: usize) -> (Policy, Vec<StepMetrics>) {
        let (policy, q) = setup(4);
        let mut t = Trainer::new(policy, cfg).unwrap();
        let metrics = (0..steps).map(|_| t.step(&[&q]).unwrap()).collect();
        (t.into_policy(), metrics)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (before, _) = setup(4);
        let (after, m) = run(GrpoConfig { learning_rate: 0.0, ..GrpoConfig::default() }, 2);
        assert_eq!(before, after);
        assert_eq!(m.len(), 2);
        assert!(m.iter().all(|s| s.update_norm == 0.0 && !s.aborted));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = GrpoConfig { learning_rate: 0.05, ..GrpoConfig::default() };
        let (pa, ma) = run(cfg.clone(), 3);
        let (pb, mb) = run(cfg, 3);
        assert_eq!(ma, mb);
        assert_eq!(pa, pb);
    }

    #[test]
    fn larger_beta_pulls_harder_toward_reference() {
        let (p0, q) = setup(5);
        let grads: BTreeMap<String, Tensor> = p0
            .trainable_parameters()
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::filled(t.rows(), t.cols(), 0.02)))
            .collect();
        let distance = |p: &Policy| -> f64 {
            p.trainable_parameters()
                .iter()
                .map(|(n, t)| t.zip_with(p0.param(n).unwrap(), |a, b| (a - b).powi(2)).unwrap().sum())
                .sum::<f64>()
                .sqrt()
        };
        let after = |beta: f64| {
            let cfg = GrpoConfig { beta, learning_rate: 1e-5, ..GrpoConfig::default() };
            let mut t = Trainer::new(p0.clone(), cfg).unwrap();
            t.policy.apply_update(&grads, 1.0).unwrap();
            t.step(&[&q]).unwrap();
            distance(t.policy())
        };
        let (d0, d1, d1000) = (after(0.0), after(1.0), after(1000.0));
        assert!(d1000 < d1 && d1 < d0, "{d0} {d1} {d1000}");
    }

    proptest! {
        #[test]
        fn kl_nonnegative(rho in 0.1f64..10.0) {
            let k = kl_penalty(0.0, rho.ln());
            prop_assert!(k >= 0.0);
        }

        #[test]
        fn clip_bound(lt in -3.0f64..3.0, lo in -3.0f64..3.0, a in -3.0f64..3.0, eps in 0.01f64..0.99) {
            let t = clipped_term(lt, lo, a, eps);
            let ratio = (lt - lo).exp();
            prop_assert!(t <= ratio * a + 1e-12);
            prop_assert!(t <= (1.0 + eps) * a.abs() + 1e-12);
        }

        #[test]
        fn advantages_standardized(r in proptest::collection::vec(0u8..3, 2..16)) {
            let rewards: Vec<f64> = r.iter().map(|&v| f64::from(v)).collect();
            let a = normalize_advantages(&rewards, 1e-6);
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let distinct = rewards.iter().any(|&x| x != rewards[0]);
            if distinct {
                let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                prop_assert!(mean.abs() <= 1e-12);
                prop_assert!((var.sqrt() - 1.0).abs() <= 1e-9);
            } else {
                prop_assert!(a.iter().all(|&x| x == 0.0));
            }
        }
    }
}
