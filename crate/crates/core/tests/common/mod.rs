#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segrl_core::policy::{PolicyParams, Token};
use segrl_core::ratios::{self, RatioMode};
use segrl_core::config::RunConfig;
use segrl_core::rollout::{self, Prompt, RolloutConfig, RolloutState, Status, Termination, Trajectory};
use segrl_core::tasks::{self, TaskVocab};
use segrl_core::trainer::{self, Group, TokenMask, TrainerConfig};
use segrl_core::Exec;

pub const VOCAB: usize = 6;
pub const EOS: Token = 5;
pub const CONTEXT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskState {
    None,
    Random,
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipRegime {
    /// Denominators equal the current policy; every ratio is 1.
    OnPolicy,
    /// Ratios spread around the clip boundaries.
    Mixed,
    /// Most ratios outside the trust region.
    Heavy,
}

/// A random batch plus the masks and trainer config to evaluate it with.
pub struct Case {
    pub params: PolicyParams,
    pub groups: Vec<Group>,
    pub masks: Vec<TokenMask>,
    pub cfg: TrainerConfig,
}

fn random_trajectory(
    params: &PolicyParams,
    uid: u64,
    group: u64,
    member: usize,
    prompt: &Arc<Prompt>,
    multi_segment: bool,
    r: &mut ChaCha8Rng,
) -> Trajectory {
    let mut t = Trajectory::new(uid, group, member, Arc::clone(prompt));
    let segments = if multi_segment { r.random_range(1..=3) } else { 1 };
    for _ in 0..segments {
        let mut lane = segrl_core::rng::stream(r.random(), 0);
        rollout::decode_segment(&mut t, params, r.random_range(2..=5), 1.0, EOS, &mut lane).unwrap();
        if t.response().last() == Some(&EOS) {
            break;
        }
    }
    t.status = if t.response().last() == Some(&EOS) {
        Status::FinishedEos
    } else {
        Status::TruncatedGlobal
    };
    t
}

/// Build a batch whose configuration is drawn from `seed`.
pub fn random_case(seed: u64, mode: RatioMode, masks: MaskState, clip: ClipRegime) -> Case {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = VOCAB * (CONTEXT * VOCAB + 1);
    let weights: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let params = PolicyParams::from_weights(VOCAB, CONTEXT, weights, 3).unwrap();
    let spread = match clip {
        ClipRegime::OnPolicy => 0.0,
        ClipRegime::Mixed => 0.35,
        ClipRegime::Heavy => 1.5,
    };
    let multi = mode != RatioMode::Tois;
    let n_groups = r.random_range(1..=3);
    let gsize = r.random_range(2..=4);
    let mut groups = Vec::new();
    let mut uid = 0;
    for g in 0..n_groups {
        let prompt = Arc::new(Prompt {
            id: format!("p{g}"),
            tokens: (0..r.random_range(1..=3)).map(|_| r.random_range(0..EOS)).collect(),
            reference: "0".into(),
        });
        let mut trajs = Vec::new();
        for m in 0..gsize {
            let mut t = random_trajectory(&params, uid, g as u64, m, &prompt, multi, &mut r);
            uid += 1;
            let cur = rollout::response_logprobs(&params, &t).unwrap();
            let mut shift = |v: &[f64]| -> Vec<f64> {
                v.iter().map(|&l| l + if spread > 0.0 { r.random_range(-spread..spread) } else { 0.0 }).collect()
            };
            let stamped = shift(&cur);
            let mut gen = shift(&cur);
            // generation log-probs must stay valid probabilities
            for l in gen.iter_mut() {
                *l = l.min(0.0);
            }
            let mut off = 0;
            for s in t.segments.iter_mut() {
                let len = s.tokens.len();
                s.gen_logprobs = gen[off..off + len].to_vec();
                off += len;
            }
            t.final_rollout_logprobs = Some(stamped);
            t.final_version = Some(params.version());
            trajs.push(t);
        }
        let mut rewards: Vec<u8> = (0..gsize).map(|_| r.random_range(0..=1)).collect();
        if rewards.iter().all(|&x| x == rewards[0]) {
            rewards[0] ^= 1;
        }
        let mut group = Group::new(trajs, rewards).unwrap();
        group.assign_advantages().unwrap();
        groups.push(group);
    }
    let mut cfg = TrainerConfig {
        ratio_mode: mode,
        eps_low: 0.2,
        eps_high: if r.random_bool(0.5) { 0.2 } else { 0.28 },
        tau: 0.5,
        sigma: 10.0,
        ..TrainerConfig::default()
    };
    let built = match masks {
        MaskState::None => {
            cfg.masking = trainer::Masking::Off;
            trainer::batch_loss_and_grad(&groups, &params, &cfg, Exec::Sequential).unwrap().masks
        }
        MaskState::Dynamic => {
            cfg.masking = trainer::Masking::Dynamic;
            trainer::batch_loss_and_grad(&groups, &params, &cfg, Exec::Sequential).unwrap().masks
        }
        MaskState::Random => groups
            .iter()
            .flat_map(|g| &g.trajectories)
            .map(|t| TokenMask((0..t.response_len()).map(|_| r.random_bool(0.3)).collect()))
            .collect(),
    };
    Case {
        params,
        groups,
        masks: built,
        cfg,
    }
}

/// Distance of the closest unmasked ratio to a clip boundary.
pub fn kink_distance(case: &Case) -> f64 {
    let mut best = f64::INFINITY;
    let trajs = case.groups.iter().flat_map(|g| &g.trajectories);
    for (t, m) in trajs.zip(&case.masks) {
        let rs = ratios::compute_ratios(t, &case.params, case.cfg.ratio_mode).unwrap();
        for (i, &x) in rs.values().iter().enumerate() {
            if !m.is_set(i) {
                let d = (x - (1.0 - case.cfg.eps_low)).abs().min((x - (1.0 + case.cfg.eps_high)).abs());
                best = best.min(d);
            }
        }
    }
    best
}

pub fn objective(case: &Case, params: &PolicyParams) -> f64 {
    trainer::batch_loss_and_grad_with_masks(&case.groups, &case.masks, params, &case.cfg, Exec::Sequential)
        .unwrap()
        .objective
}

/// Relative error between the analytic gradient and central differences
/// over every coordinate. The denominator has a small floor: batches whose
/// true gradient vanishes (identical responses) compare round-off only.
pub fn gradient_error(case: &Case, h: f64) -> f64 {
    let out = trainer::batch_loss_and_grad_with_masks(&case.groups, &case.masks, &case.params, &case.cfg, Exec::Sequential)
        .unwrap();
    let analytic = out.grad.values();
    let mut p = case.params.clone();
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (i, &a) in analytic.iter().enumerate() {
        let w = p.weights()[i];
        p.weights_mut()[i] = w + h;
        let up = objective(case, &p);
        p.weights_mut()[i] = w - h;
        let down = objective(case, &p);
        p.weights_mut()[i] = w;
        let fd = (up - down) / (2.0 * h);
        diff += (fd - a).powi(2);
        scale += fd.powi(2).max(a.powi(2));
    }
    (diff / scale.max(1e-16)).sqrt()
}

const MODES: [RatioMode; 3] = [RatioMode::Tois, RatioMode::Sais, RatioMode::Pois];
const MASKS: [MaskState; 3] = [MaskState::None, MaskState::Random, MaskState::Dynamic];
const CLIPS: [ClipRegime; 3] = [ClipRegime::OnPolicy, ClipRegime::Mixed, ClipRegime::Heavy];

/// Run the finite-difference check over every (mode, mask, clip) triple,
/// `per_triple` batches each; returns (configurations, worst error).
pub fn gradient_sweep(per_triple: usize) -> (usize, f64) {
    let mut count = 0;
    let mut worst = 0.0f64;
    let mut seed = 0u64;
    for mode in MODES {
        for masks in MASKS {
            for clip in CLIPS {
                let mut done = 0;
                while done < per_triple {
                    seed += 1;
                    let case = random_case(seed, mode, masks, clip);
                    // central differences are meaningless across a clip kink
                    if kink_distance(&case) < 1e-4 {
                        continue;
                    }
                    let err = gradient_error(&case, 1e-6);
                    assert!(err < 1e-4, "seed {seed} {mode:?} {masks:?} {clip:?}: relative error {err:e}");
                    worst = worst.max(err);
                    done += 1;
                    count += 1;
                }
            }
        }
    }
    (count, worst)
}


pub struct DrainReport {
    pub entries: usize,
    pub eos: usize,
    pub truncated: usize,
    pub steps: u64,
}

/// Drive `n_prompts` prompts to completion with fixed parameters, checking
/// every trajectory and every step on the way.
pub fn drain(params: &PolicyParams, cfg: &RolloutConfig, n_prompts: usize, exec: Exec) -> DrainReport {
    let tv = TaskVocab::new(9).unwrap();
    let mut tc = RunConfig::default().tasks;
    tc.train_size = n_prompts;
    let records = tasks::generate_tasks(&tc, n_prompts, 4, 0).unwrap();
    let prompts = tasks::to_prompts(&records, &tv).unwrap();
    let eos: Token = tv.vocab.eos();
    let mut state = RolloutState::new(prompts);
    let mut seen: BTreeMap<u64, Vec<Vec<Token>>> = BTreeMap::new();
    let (mut eos_n, mut trunc_n) = (0, 0);
    while !state.is_drained() {
        let s = rollout::rollout_step(&mut state, params, cfg, eos, 9, exec).unwrap();
        assert!(s.lanes <= cfg.lane_capacity());
        eos_n += s.finished_eos;
        trunc_n += s.truncated;
        for t in state.unfinished_pool.iter().chain(&state.experience_pool) {
            let segs = seen.entry(t.uid).or_default();
            // earlier segments are never rewritten
            for (old, new) in segs.iter().zip(&t.segments) {
                assert_eq!(old, &new.tokens);
            }
            if t.segments.len() > segs.len() {
                assert_eq!(t.segments.len(), segs.len() + 1, "one segment per step");
                segs.push(t.segments.last().unwrap().tokens.clone());
            }
        }
    }
    for t in &state.experience_pool {
        t.check_invariants(cfg, eos).unwrap();
        let joined: Vec<Token> = seen[&t.uid].concat();
        assert_eq!(joined, t.response());
        let term = rollout::classify_termination(t, cfg, eos).unwrap();
        let by_status = match t.status {
            Status::FinishedEos => Termination::FinishedEos,
            Status::TruncatedGlobal => Termination::TruncatedGlobal,
            Status::InProgress => panic!("in-progress trajectory in the experience pool"),
        };
        assert_eq!(term, by_status);
        let ends_eos = t.response().last() == Some(&eos);
        // EOS takes precedence over the length cap
        assert_eq!(ends_eos, t.status == Status::FinishedEos);
        let last = t.segments.len() - 1;
        for (j, s) in t.segments.iter().enumerate() {
            if j < last {
                assert_eq!(s.tokens.len(), cfg.segment_len());
            }
        }
    }
    let mut per_group: BTreeMap<u64, usize> = BTreeMap::new();
    for t in &state.experience_pool {
        *per_group.entry(t.group_id).or_default() += 1;
    }
    assert!(per_group.values().all(|&n| n == cfg.group_size));
    assert_eq!(eos_n + trunc_n, state.experience_pool.len());
    DrainReport {
        entries: state.experience_pool.len(),
        eos: eos_n,
        truncated: trunc_n,
        steps: state.step,
    }
}

