//! Group-relative policy optimisation with masking of well-mastered
//! positive tokens.
//!
//! The objective maximised over a batch of retained groups is
//!
//! ```text
//! J = (1 / Σ_i |o_i|) · Σ_i Σ_t (1 − m_{i,t}) · min(r_{i,t} A_i, clip(r_{i,t}, 1−ε_low, 1+ε_high) A_i)
//! ```
//!
//! where `A_i` is the group-normalised reward and `m_{i,t}` marks a token of
//! a reward-1 response whose current probability is at least `tau`, gated on
//! the response's mean entropy being below the target `sigma`. Masked tokens
//! stay in the denominator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::policy::{self, Gradient, PolicyParams};
use crate::ratios::{self, RatioMode};
use crate::rollout::Trajectory;

/// Which tokens of positive responses are withheld from the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Masking {
    /// Train on every token.
    Off,
    /// Always mask well-mastered positive tokens.
    Always,
    /// Mask them only while entropy is below `sigma`.
    #[default]
    Dynamic,
}

/// Entropy statistic compared against `sigma` by [`Masking::Dynamic`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyGate {
    #[default]
    PerResponse,
    BatchMean,
}

/// Which policy supplies the token probability tested against `tau`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MptProbSource {
    #[default]
    Training,
    Generation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub tau: f64,
    pub sigma: f64,
    pub learning_rate: f64,
    pub updates_per_step: usize,
    pub ratio_mode: RatioMode,
    pub masking: Masking,
    pub entropy_gate: EntropyGate,
    pub mpt_probs: MptProbSource,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.2,
            tau: 0.99,
            sigma: 0.2,
            learning_rate: 1e-3,
            updates_per_step: 1,
            ratio_mode: RatioMode::Pois,
            masking: Masking::Dynamic,
            entropy_gate: EntropyGate::PerResponse,
            mpt_probs: MptProbSource::Training,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl TrainerConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let open01 = |x: f64| x > 0.0 && x < 1.0;
        if !open01(self.eps_low) || !open01(self.eps_high) {
            p.push("trainer.eps_low and trainer.eps_high must lie in (0, 1)".into());
        }
        if !open01(self.tau) {
            p.push("trainer.tau must lie in (0, 1)".into());
        }
        if !(self.sigma >= 0.0) {
            p.push("trainer.sigma must be non-negative".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            p.push("trainer.learning_rate must be positive".into());
        }
        if self.updates_per_step == 0 {
            p.push("trainer.updates_per_step must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            p.push("trainer.adam_beta1/adam_beta2 must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            p.push("trainer.adam_eps must be positive and weight_decay non-negative".into());
        }
        p
    }
}

/// `G` completed trajectories of one prompt instance.
#[derive(Clone, Debug)]
pub struct Group {
    pub prompt_id: String,
    pub group_id: u64,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<u8>,
    pub advantages: Option<Vec<f64>>,
    pub filtered: bool,
}

impl Group {
    pub fn new(trajectories: Vec<Trajectory>, rewards: Vec<u8>) -> Result<Self> {
        let first = trajectories.first().ok_or_else(|| Error::Input("empty group".into()))?;
        if rewards.len() != trajectories.len() {
            return Err(Error::Input("one reward per trajectory".into()));
        }
        if rewards.iter().any(|&r| r > 1) {
            return Err(Error::Input("rewards must be 0 or 1".into()));
        }
        let (prompt_id, group_id) = (first.prompt_id().to_string(), first.group_id);
        if trajectories.iter().any(|t| t.group_id != group_id || t.prompt_id() != prompt_id) {
            return Err(Error::Input("trajectories from different prompts in one group".into()));
        }
        if trajectories.iter().any(|t| !t.is_complete()) {
            return Err(Error::Input("group contains an unfinished trajectory".into()));
        }
        let mut trajectories = trajectories;
        for (t, &r) in trajectories.iter_mut().zip(&rewards) {
            t.reward = Some(r);
            t.advantage = None;
        }
        Ok(Self {
            prompt_id,
            group_id,
            trajectories,
            rewards,
            advantages: None,
            filtered: false,
        })
    }

    pub fn correct(&self) -> usize {
        self.rewards.iter().filter(|&&r| r == 1).count()
    }

    /// Normalise rewards into advantages and stamp them on each trajectory.
    pub fn assign_advantages(&mut self) -> Result<()> {
        let adv = group_advantage(&self.rewards)?;
        for (t, &a) in self.trajectories.iter_mut().zip(&adv) {
            t.advantage = Some(a);
        }
        self.advantages = Some(adv);
        Ok(())
    }
}

/// `(r_i − mean) / std` with the population standard deviation.
pub fn group_advantage(rewards: &[u8]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::Input("empty reward vector".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().map(|&r| r as f64).sum::<f64>() / n;
    let var = rewards.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Err(Error::Precondition(
            "zero reward variance; group should have been removed by dynamic sampling".into(),
        ));
    }
    Ok(rewards.iter().map(|&r| (r as f64 - mean) / std).collect())
}

/// Groups split by the dynamic-sampling constraint `0 < #correct < G`.
#[derive(Clone, Debug, Default)]
pub struct FilterOutcome {
    pub retained: Vec<Group>,
    pub dropped: Vec<Group>,
}

pub fn dynamic_sampling_filter(groups: Vec<Group>) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for mut g in groups {
        let c = g.correct();
        if c == 0 || c == g.trajectories.len() {
            g.filtered = true;
            g.advantages = None;
            out.dropped.push(g);
        } else {
            out.retained.push(g);
        }
    }
    out
}

/// Per-token binary flags aligned with the response.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenMask(pub Vec<bool>);

impl TokenMask {
    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.0[i]
    }
}

/// Tokens of a reward-1 trajectory whose probability is at least `tau`.
pub fn identify_mpts(traj: &Trajectory, chosen_probs: &[f64], tau: f64) -> TokenMask {
    if traj.reward != Some(1) {
        return TokenMask::zeros(chosen_probs.len());
    }
    TokenMask(chosen_probs.iter().map(|&p| p >= tau).collect())
}

/// The MPT set while `h_bar < sigma`, else nothing.
pub fn dmmpt_mask(mpts: &TokenMask, h_bar: f64, sigma: f64) -> TokenMask {
    if h_bar < sigma {
        mpts.clone()
    } else {
        TokenMask::zeros(mpts.0.len())
    }
}

/// `min(r·A, clip(r, 1−ε_low, 1+ε_high)·A)`.
pub fn token_objective(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    (ratio * advantage).min(clipped * advantage)
}

/// Whether the clipped branch is the minimum and strictly below the
/// unclipped one, i.e. the token carries no gradient.
pub fn clip_binding(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> bool {
    if advantage > 0.0 {
        ratio > 1.0 + eps_high
    } else if advantage < 0.0 {
        ratio < 1.0 - eps_low
    } else {
        false
    }
}

/// Current-policy quantities for each response position.
#[derive(Clone, Debug)]
pub struct TrajectoryEval {
    pub current_logprobs: Vec<f64>,
    pub chosen_probs: Vec<f64>,
    pub entropies: Vec<f64>,
    /// Full next-token distribution at each response position.
    pub position_probs: Vec<Vec<f64>>,
    pub mean_entropy: f64,
}

pub fn evaluate_trajectory(traj: &Trajectory, params: &PolicyParams) -> Result<TrajectoryEval> {
    let seq = traj.full_sequence();
    let start = traj.prompt.tokens.len();
    let n = seq.len() - start;
    if n == 0 {
        return Err(Error::Input(format!("trajectory {} has an empty response", traj.uid)));
    }
    let mut ev = TrajectoryEval {
        current_logprobs: Vec::with_capacity(n),
        chosen_probs: Vec::with_capacity(n),
        entropies: Vec::with_capacity(n),
        position_probs: Vec::with_capacity(n),
        mean_entropy: 0.0,
    };
    for i in start..seq.len() {
        let d = policy::distribution(params, &seq[..i])?;
        let tok = seq[i];
        ev.current_logprobs.push(d.log_prob(tok));
        ev.chosen_probs.push(d.probs[tok as usize]);
        ev.entropies.push(policy::token_entropy(&d));
        ev.position_probs.push(d.probs);
    }
    ev.mean_entropy = ev.entropies.iter().sum::<f64>() / n as f64;
    Ok(ev)
}

/// Mean over response positions of the full next-token entropy.
pub fn response_mean_entropy(traj: &Trajectory, params: &PolicyParams) -> Result<f64> {
    Ok(evaluate_trajectory(traj, params)?.mean_entropy)
}

/// Batch statistics reported with each update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub trajectories: usize,
    pub tokens: usize,
    pub masked_tokens: usize,
    pub clipped_tokens: usize,
    pub mean_ratio: f64,
    pub max_ratio_deviation: f64,
    pub mean_entropy: f64,
}

impl BatchStats {
    pub fn masked_fraction(&self) -> f64 {
        frac(self.masked_tokens, self.tokens)
    }

    pub fn clip_fraction(&self) -> f64 {
        frac(self.clipped_tokens, self.tokens)
    }
}

fn frac(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// The maximised objective `J`.
    pub objective: f64,
    /// Gradient of `J` with respect to the weights.
    pub grad: Gradient,
    pub masks: Vec<TokenMask>,
    pub stats: BatchStats,
}

impl BatchOutput {
    /// Reported loss, `−J`.
    pub fn loss(&self) -> f64 {
        -self.objective
    }
}

fn batch_items(groups: &[Group]) -> Result<Vec<(&Trajectory, f64)>> {
    let mut items = Vec::new();
    for g in groups {
        let adv = g
            .advantages
            .as_ref()
            .ok_or_else(|| Error::State(format!("group {} has no advantages", g.group_id)))?;
        for (t, &a) in g.trajectories.iter().zip(adv) {
            items.push((t, a));
        }
    }
    if items.is_empty() {
        return Err(Error::NothingToTrain);
    }
    Ok(items)
}

/// Masks for each trajectory in batch order, from current-policy evaluations.
pub fn compute_masks(
    items: &[(&Trajectory, f64)],
    evals: &[TrajectoryEval],
    cfg: &TrainerConfig,
) -> Vec<TokenMask> {
    let batch_h = evals.iter().map(|e| e.mean_entropy).sum::<f64>() / evals.len().max(1) as f64;
    items
        .iter()
        .zip(evals)
        .map(|((traj, _), ev)| {
            let n = ev.chosen_probs.len();
            if cfg.masking == Masking::Off {
                return TokenMask::zeros(n);
            }
            let gen_probs;
            let probs = match cfg.mpt_probs {
                MptProbSource::Training => &ev.chosen_probs,
                MptProbSource::Generation => {
                    gen_probs = traj.gen_logprobs().iter().map(|l| l.exp()).collect::<Vec<_>>();
                    &gen_probs
                }
            };
            let mpts = identify_mpts(traj, probs, cfg.tau);
            match cfg.masking {
                Masking::Off => unreachable!(),
                Masking::Always => mpts,
                Masking::Dynamic => {
                    let h = match cfg.entropy_gate {
                        EntropyGate::PerResponse => ev.mean_entropy,
                        EntropyGate::BatchMean => batch_h,
                    };
                    dmmpt_mask(&mpts, h, cfg.sigma)
                }
            }
        })
        .collect()
}

/// Trajectories per gradient chunk; fixed so the reduction order does not
/// depend on the thread count.
const GRAD_CHUNK: usize = 16;

/// Objective and exact gradient with masks held fixed. Clipped tokens
/// whose clipped branch binds contribute no gradient.
pub fn batch_loss_and_grad_with_masks(
    groups: &[Group],
    masks: &[TokenMask],
    params: &PolicyParams,
    cfg: &TrainerConfig,
    exec: Exec,
) -> Result<BatchOutput> {
    let items = batch_items(groups)?;
    let evals = exec
        .map(&items, |(t, _)| evaluate_trajectory(t, params))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    finish_batch(&items, &evals, masks.to_vec(), params, cfg, exec)
}

/// Objective, gradient and statistics over retained groups, with masks
/// derived from the current policy.
pub fn batch_loss_and_grad(groups: &[Group], params: &PolicyParams, cfg: &TrainerConfig, exec: Exec) -> Result<BatchOutput> {
    let items = batch_items(groups)?;
    let evals = exec
        .map(&items, |(t, _)| evaluate_trajectory(t, params))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let masks = compute_masks(&items, &evals, cfg);
    finish_batch(&items, &evals, masks, params, cfg, exec)
}

struct ChunkAccum {
    objective: f64,
    grad: Gradient,
    clipped: usize,
    ratio_sum: f64,
    max_dev: f64,
}

fn finish_batch(
    items: &[(&Trajectory, f64)],
    evals: &[TrajectoryEval],
    masks: Vec<TokenMask>,
    params: &PolicyParams,
    cfg: &TrainerConfig,
    exec: Exec,
) -> Result<BatchOutput> {
    if masks.len() != items.len() {
        return Err(Error::Input("one mask per trajectory".into()));
    }
    let total_tokens: usize = evals.iter().map(|e| e.chosen_probs.len()).sum();
    let norm = 1.0 / total_tokens as f64;
    let n_chunks = items.len().div_ceil(GRAD_CHUNK);
    let chunks = exec.map_range(n_chunks, |c| -> Result<ChunkAccum> {
        let mut acc = ChunkAccum {
            objective: 0.0,
            grad: Gradient::zeros_like(params),
            clipped: 0,
            ratio_sum: 0.0,
            max_dev: 0.0,
        };
        let mut feats = Vec::new();
        let lo = c * GRAD_CHUNK;
        let hi = (lo + GRAD_CHUNK).min(items.len());
        for k in lo..hi {
            let (traj, adv) = items[k];
            let ev = &evals[k];
            let mask = &masks[k];
            if mask.0.len() != ev.chosen_probs.len() {
                return Err(Error::Input(format!("mask length mismatch for trajectory {}", traj.uid)));
            }
            let ratios = ratios::ratios_from_logprobs(&ev.current_logprobs, traj, cfg.ratio_mode)?;
            let seq = traj.full_sequence();
            let start = traj.prompt.tokens.len();
            for (t, &r) in ratios.values().iter().enumerate() {
                acc.ratio_sum += r;
                acc.max_dev = acc.max_dev.max((r - 1.0).abs());
                if mask.is_set(t) {
                    continue;
                }
                acc.objective += token_objective(r, adv, cfg.eps_low, cfg.eps_high);
                if clip_binding(r, adv, cfg.eps_low, cfg.eps_high) {
                    acc.clipped += 1;
                    continue;
                }
                params.active_features(&seq[..start + t], &mut feats)?;
                acc.grad.add_score(&feats, &ev.position_probs[t], seq[start + t], adv * r);
            }
        }
        Ok(acc)
    });
    let mut grad = Gradient::zeros_like(params);
    let mut stats = BatchStats {
        trajectories: items.len(),
        tokens: total_tokens,
        masked_tokens: masks.iter().map(TokenMask::count).sum(),
        mean_entropy: evals.iter().map(|e| e.mean_entropy).sum::<f64>() / items.len() as f64,
        ..Default::default()
    };
    let mut objective = 0.0;
    let mut ratio_sum = 0.0;
    for chunk in chunks {
        let chunk = chunk?;
        objective += chunk.objective;
        grad.add_assign(&chunk.grad);
        stats.clipped_tokens += chunk.clipped;
        ratio_sum += chunk.ratio_sum;
        stats.max_ratio_deviation = stats.max_ratio_deviation.max(chunk.max_dev);
    }
    grad.scale(norm);
    stats.mean_ratio = ratio_sum * norm;
    Ok(BatchOutput {
        objective: objective * norm,
        grad,
        masks,
        stats,
    })
}

/// Adam-style moment optimizer with decoupled weight decay and a constant
/// learning rate, used for gradient ascent.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainerConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One ascent step on `x` along `grad`.
    pub fn ascent_step(&mut self, x: &mut [f64], grad: &[f64]) -> Result<()> {
        if x.len() != self.m.len() || grad.len() != x.len() {
            return Err(Error::Input("optimizer shape mismatch".into()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut next = x.to_vec();
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let step = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
            next[i] = x[i] + self.lr * step - self.lr * self.weight_decay * x[i];
        }
        if next.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric("non-finite parameter after update".into()));
        }
        x.copy_from_slice(&next);
        Ok(())
    }
}

/// Ascent step on the objective; returns the new parameters at version + 1.
pub fn apply_update(params: &PolicyParams, grad: &Gradient, opt: &mut Adam) -> Result<PolicyParams> {
    if !grad.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let mut next = params.clone();
    opt.ascent_step(next.weights_mut(), grad.values())?;
    next.bump_version();
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::{Prompt, Segment, Status};
    use std::sync::Arc;

    #[test]
    fn advantage_worked_example() {
        let a = group_advantage(&[1, 0, 0, 1, 1, 0, 1, 1]).unwrap();
        // mean 0.625, population std sqrt(0.625 * 0.375)
        let std = (0.625f64 * 0.375).sqrt();
        assert!((std - 0.48412).abs() < 1e-5);
        for (&r, &x) in [1, 0, 0, 1, 1, 0, 1, 1].iter().zip(&a) {
            let expect = if r == 1 { 0.77460 } else { -1.29099 };
            assert!((x - expect).abs() < 1e-5, "{x}");
        }
        assert_eq!(group_advantage(&[1, 0]).unwrap(), vec![1.0, -1.0]);
        assert!(matches!(group_advantage(&[1, 1, 1]), Err(Error::Precondition(_))));
        assert!(matches!(group_advantage(&[0, 0]), Err(Error::Precondition(_))));
    }

    proptest::proptest! {
        #[test]
        fn advantages_are_normalized_and_sign_coherent(rewards in proptest::collection::vec(0u8..2, 2..32)) {
            let c = rewards.iter().filter(|&&r| r == 1).count();
            proptest::prop_assume!(c > 0 && c < rewards.len());
            let a = group_advantage(&rewards).unwrap();
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            proptest::prop_assert!(mean.abs() < 1e-9);
            proptest::prop_assert!((std - 1.0).abs() < 1e-9);
            for (&r, &x) in rewards.iter().zip(&a) {
                let coherent = if r == 1 { x > 0.0 } else { x < 0.0 };
                proptest::prop_assert!(coherent);
            }
        }
    }

    #[test]
    fn token_objective_examples() {
        for a in [-2.0, -0.5, 0.3, 1.7] {
            assert_eq!(token_objective(1.0, a, 0.2, 0.28), a);
        }
        assert!((token_objective(1.5, 1.0, 0.2, 0.2) - 1.2).abs() < 1e-15);
        assert!((token_objective(0.5, -1.0, 0.2, 0.2) - -0.8).abs() < 1e-15);
        assert!(clip_binding(1.5, 1.0, 0.2, 0.2));
        assert!(clip_binding(0.5, -1.0, 0.2, 0.2));
        assert!(!clip_binding(0.5, 1.0, 0.2, 0.2));
        assert!(!clip_binding(1.5, -1.0, 0.2, 0.2));
    }

    fn traj_with(reward: u8, n: usize) -> Trajectory {
        let mut t = Trajectory::new(
            0,
            0,
            0,
            Arc::new(Prompt {
                id: "p".into(),
                tokens: vec![0],
                reference: "0".into(),
            }),
        );
        t.segments.push(Segment {
            tokens: vec![1; n],
            gen_version: 0,
            gen_logprobs: vec![-0.1; n],
        });
        t.status = Status::FinishedEos;
        t.reward = Some(reward);
        t
    }

    #[test]
    fn mpt_examples() {
        let t = traj_with(1, 3);
        assert_eq!(identify_mpts(&t, &[0.995, 0.5, 0.999], 0.99).0, vec![true, false, true]);
        assert_eq!(identify_mpts(&t, &[0.99], 0.99).0, vec![true]);
        let t0 = traj_with(0, 2);
        assert_eq!(identify_mpts(&t0, &[0.995, 0.999], 0.99).count(), 0);
    }

    #[test]
    fn dmmpt_gate_examples() {
        let m = TokenMask(vec![true, false, true]);
        assert_eq!(dmmpt_mask(&m, 0.1, 0.2), m);
        assert_eq!(dmmpt_mask(&m, 0.3, 0.2).count(), 0);
        assert_eq!(dmmpt_mask(&m, 0.0, 0.0).count(), 0);
    }

    #[test]
    fn mean_entropy_examples() {
        let p = PolicyParams::zeros(16, 2).unwrap();
        let t = traj_with(1, 5);
        assert!((response_mean_entropy(&t, &p).unwrap() - 16f64.ln()).abs() < 1e-12);
        // deterministic policy
        let mut q = PolicyParams::zeros(16, 2).unwrap();
        let b = q.bias_feature();
        q.set_weight(1, b, 800.0);
        assert!(response_mean_entropy(&t, &q).unwrap() < 1e-12);
        // positions with entropies 0 and ln 2 average to ln2 / 2
        let h = [0.0, 2f64.ln()];
        assert!((h.iter().sum::<f64>() / 2.0 - 0.34657).abs() < 1e-5);
    }

    #[test]
    fn filter_drops_uniform_groups() {
        let mk = |rs: Vec<u8>| {
            let ts = rs
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    let mut t = traj_with(0, 2);
                    t.member = i;
                    t
                })
                .collect();
            Group::new(ts, rs).unwrap()
        };
        let out = dynamic_sampling_filter(vec![mk(vec![0, 0, 0]), mk(vec![1, 1, 1]), mk(vec![1, 0, 1])]);
        assert_eq!(out.retained.len(), 1);
        assert_eq!(out.dropped.len(), 2);
        assert!(out.dropped.iter().all(|g| g.filtered));
    }

    #[test]
    fn adam_zero_gradient_keeps_weights_and_bumps_version() {
        let p = PolicyParams::zeros(5, 2).unwrap();
        let mut q = p.clone();
        q.weights_mut()[3] = 0.7;
        let cfg = TrainerConfig::default();
        let mut opt = Adam::new(q.weights().len(), &cfg);
        let g = Gradient::zeros_like(&q);
        let next = apply_update(&q, &g, &mut opt).unwrap();
        assert_eq!(next.weights(), q.weights());
        assert_eq!(next.version(), q.version() + 1);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // maximise −(x − 3)², optimum at 3
        let cfg = TrainerConfig {
            learning_rate: 0.05,
            ..Default::default()
        };
        let mut opt = Adam::new(1, &cfg);
        let mut x = [0.0];
        for _ in 0..20_000 {
            let g = [-2.0 * (x[0] - 3.0)];
            opt.ascent_step(&mut x, &g).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 1e-6, "{}", x[0]);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let cfg = TrainerConfig::default();
        let mut opt = Adam::new(2, &cfg);
        let mut x = [0.0, 0.0];
        assert!(matches!(opt.ascent_step(&mut x, &[f64::NAN, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn config_problems() {
        assert!(TrainerConfig::default().problems().is_empty());
        let bad = TrainerConfig {
            eps_low: 0.0,
            tau: 1.0,
            sigma: -1.0,
            ..Default::default()
        };
        assert_eq!(bad.problems().len(), 3);
    }
}
