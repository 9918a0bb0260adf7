//! Segment-bounded rollouts with an unfinished pool and an experience pool.
//!
//! Each call to [`rollout_step`] schedules every unfinished trajectory first,
//! fills the remaining lanes with whole groups of fresh prompts, and decodes
//! at most one segment per lane. A lane ends its segment on EOS, on the
//! segment budget, or on the global length cap. Completed trajectories move
//! to the experience pool; the rest carry over with their history intact.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::policy::{self, PolicyParams, Token};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub global_max_len: usize,
    pub segment_count: usize,
    pub group_size: usize,
    pub prompt_batch: usize,
    pub temperature: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            global_max_len: 256,
            segment_count: 8,
            group_size: 8,
            prompt_batch: 16,
            temperature: 0.85,
        }
    }
}

impl RolloutConfig {
    pub fn segment_len(&self) -> usize {
        self.global_max_len / self.segment_count.max(1)
    }

    /// Number of decode lanes per step.
    pub fn lane_capacity(&self) -> usize {
        self.prompt_batch * self.group_size
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.global_max_len == 0 {
            p.push("rollout.global_max_len must be positive".into());
        }
        if self.segment_count == 0 {
            p.push("rollout.segment_count must be positive".into());
        } else if !self.global_max_len.is_multiple_of(self.segment_count) {
            p.push(format!(
                "rollout.segment_count {} does not divide global_max_len {}",
                self.segment_count, self.global_max_len
            ));
        }
        if self.group_size < 2 {
            p.push("rollout.group_size must be at least 2".into());
        }
        if self.prompt_batch == 0 {
            p.push("rollout.prompt_batch must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            p.push("rollout.temperature must be positive".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }
}

/// A prompt with its verifiable reference answer.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub id: String,
    pub tokens: Vec<Token>,
    pub reference: String,
}

/// Contiguous tokens produced by one policy version.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub tokens: Vec<Token>,
    pub gen_version: u64,
    /// Temperature-1 log-probabilities under the generating policy.
    pub gen_logprobs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    InProgress,
    FinishedEos,
    TruncatedGlobal,
}

/// Outcome of extending a trajectory by one segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    FinishedEos,
    SegmentBoundary,
    TruncatedGlobal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Unique per lane; keys the lane's random stream.
    pub uid: u64,
    /// One id per admitted prompt instance.
    pub group_id: u64,
    /// Position within the group.
    pub member: usize,
    pub prompt: Arc<Prompt>,
    pub segments: Vec<Segment>,
    pub status: Status,
    /// Log-probabilities of every response token under the policy that was
    /// active when the trajectory became trainable.
    pub final_rollout_logprobs: Option<Vec<f64>>,
    pub final_version: Option<u64>,
    pub reward: Option<u8>,
    pub advantage: Option<f64>,
}

impl Trajectory {
    pub fn new(uid: u64, group_id: u64, member: usize, prompt: Arc<Prompt>) -> Self {
        Self {
            uid,
            group_id,
            member,
            prompt,
            segments: Vec::new(),
            status: Status::InProgress,
            final_rollout_logprobs: None,
            final_version: None,
            reward: None,
            advantage: None,
        }
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt.id
    }

    pub fn prompt_tokens(&self) -> &[Token] {
        &self.prompt.tokens
    }

    pub fn response_len(&self) -> usize {
        self.segments.iter().map(|s| s.tokens.len()).sum()
    }

    /// Response tokens, segments joined in order.
    pub fn response(&self) -> Vec<Token> {
        self.segments.iter().flat_map(|s| s.tokens.iter().copied()).collect()
    }

    /// Prompt followed by the response.
    pub fn full_sequence(&self) -> Vec<Token> {
        let mut seq = self.prompt.tokens.clone();
        for s in &self.segments {
            seq.extend_from_slice(&s.tokens);
        }
        seq
    }

    /// Concatenated per-segment generation log-probabilities.
    pub fn gen_logprobs(&self) -> Vec<f64> {
        self.segments.iter().flat_map(|s| s.gen_logprobs.iter().copied()).collect()
    }

    /// Cumulative end offsets of each segment.
    pub fn segment_ends(&self) -> Vec<usize> {
        self.segments
            .iter()
            .scan(0, |acc, s| {
                *acc += s.tokens.len();
                Some(*acc)
            })
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.status != Status::InProgress
    }

    /// Check the structural invariants of a trajectory.
    pub fn check_invariants(&self, cfg: &RolloutConfig, eos: Token) -> Result<()> {
        let len = self.response_len();
        let fail = |m: String| Err(Error::Invariant(format!("trajectory {}: {m}", self.uid)));
        if len > cfg.global_max_len {
            return fail(format!("length {len} exceeds global max {}", cfg.global_max_len));
        }
        for s in &self.segments {
            if s.tokens.is_empty() || s.tokens.len() != s.gen_logprobs.len() {
                return fail("empty segment or misaligned log-probs".into());
            }
            if s.gen_logprobs.iter().any(|l| !(l.is_finite() && *l <= 0.0)) {
                return fail("invalid generation log-prob".into());
            }
        }
        if self.segments.windows(2).any(|w| w[0].gen_version > w[1].gen_version) {
            return fail("segment versions decrease".into());
        }
        let resp = self.response();
        let has_eos = resp.contains(&eos);
        match self.status {
            Status::FinishedEos if resp.last() != Some(&eos) => return fail("finished without trailing eos".into()),
            Status::TruncatedGlobal if len != cfg.global_max_len || has_eos => return fail("bad truncation".into()),
            Status::InProgress if has_eos || len >= cfg.global_max_len || !len.is_multiple_of(cfg.segment_len()) => {
                return fail("in-progress trajectory in a terminal shape".into())
            }
            _ => {}
        }
        if self.is_complete() != self.final_rollout_logprobs.is_some() {
            return fail("final rollout log-probs present iff complete".into());
        }
        if let Some(f) = &self.final_rollout_logprobs {
            if f.len() != len {
                return fail("final rollout log-probs misaligned".into());
            }
        }
        Ok(())
    }
}

/// Classify a trajectory that was just extended by one segment.
pub fn classify_termination(traj: &Trajectory, cfg: &RolloutConfig, eos: Token) -> Result<Termination> {
    let len = traj.response_len();
    if len > cfg.global_max_len {
        return Err(Error::Invariant(format!(
            "response length {len} exceeds global max {}",
            cfg.global_max_len
        )));
    }
    let last = traj.segments.last().and_then(|s| s.tokens.last());
    if last == Some(&eos) {
        Ok(Termination::FinishedEos)
    } else if len == cfg.global_max_len {
        Ok(Termination::TruncatedGlobal)
    } else {
        Ok(Termination::SegmentBoundary)
    }
}

/// Mutable state of the segmented rollout loop.
#[derive(Clone, Debug, Default)]
pub struct RolloutState {
    pub unfinished_pool: Vec<Trajectory>,
    pub experience_pool: Vec<Trajectory>,
    pub prompt_queue: VecDeque<Arc<Prompt>>,
    pub step: u64,
    next_uid: u64,
    next_group: u64,
    admitted_groups: u64,
}

impl RolloutState {
    pub fn new(prompts: impl IntoIterator<Item = Prompt>) -> Self {
        Self {
            prompt_queue: prompts.into_iter().map(Arc::new).collect(),
            ..Default::default()
        }
    }

    pub fn enqueue(&mut self, prompt: Arc<Prompt>) {
        self.prompt_queue.push_back(prompt);
    }

    /// Groups admitted so far.
    pub fn admitted_groups(&self) -> u64 {
        self.admitted_groups
    }

    pub fn is_drained(&self) -> bool {
        self.unfinished_pool.is_empty() && self.prompt_queue.is_empty()
    }
}

/// Build this step's lanes: every unfinished trajectory first, then whole
/// groups of new prompts while at least `group_size` lanes remain.
pub fn admit_prompts(state: &mut RolloutState, cfg: &RolloutConfig) -> Vec<Trajectory> {
    let capacity = cfg.lane_capacity();
    let mut lanes: Vec<Trajectory> = std::mem::take(&mut state.unfinished_pool);
    while capacity.saturating_sub(lanes.len()) >= cfg.group_size {
        let Some(prompt) = state.prompt_queue.pop_front() else { break };
        let group_id = state.next_group;
        state.next_group += 1;
        state.admitted_groups += 1;
        for member in 0..cfg.group_size {
            lanes.push(Trajectory::new(state.next_uid, group_id, member, Arc::clone(&prompt)));
            state.next_uid += 1;
        }
    }
    lanes
}

/// Per-step rollout counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RolloutSummary {
    pub lanes: usize,
    pub carried_over: usize,
    pub new_groups: usize,
    pub finished_eos: usize,
    pub truncated: usize,
    pub tokens_decoded: usize,
}

impl RolloutSummary {
    pub fn completed(&self) -> usize {
        self.finished_eos + self.truncated
    }
}

/// Decode up to `max_new` tokens for `traj` as one new segment.
pub fn decode_segment(
    traj: &mut Trajectory,
    params: &PolicyParams,
    max_new: usize,
    temperature: f64,
    eos: Token,
    rng: &mut rng::Rng,
) -> Result<()> {
    let mut seq = traj.full_sequence();
    let mut seg = Segment {
        tokens: Vec::with_capacity(max_new),
        gen_version: params.version(),
        gen_logprobs: Vec::with_capacity(max_new),
    };
    for _ in 0..max_new {
        let dist = policy::distribution(params, &seq)?;
        let tok = policy::sample_token(&dist, temperature, rng)?;
        seg.tokens.push(tok);
        seg.gen_logprobs.push(dist.log_prob(tok));
        seq.push(tok);
        if tok == eos {
            break;
        }
    }
    if seg.tokens.is_empty() {
        return Err(Error::Invariant("decoded an empty segment".into()));
    }
    traj.segments.push(seg);
    Ok(())
}

/// Temperature-1 log-probabilities of every response token under `params`,
/// evaluated with the full prefix as context.
pub fn response_logprobs(params: &PolicyParams, traj: &Trajectory) -> Result<Vec<f64>> {
    let seq = traj.full_sequence();
    let start = traj.prompt.tokens.len();
    (start..seq.len())
        .map(|i| Ok(policy::distribution(params, &seq[..i])?.log_prob(seq[i])))
        .collect()
}

/// Stamp the rollout-policy log-probabilities used by POIS/TOIS.
pub fn stamp_rollout_logprobs(traj: &mut Trajectory, params: &PolicyParams) -> Result<()> {
    traj.final_rollout_logprobs = Some(response_logprobs(params, traj)?);
    traj.final_version = Some(params.version());
    Ok(())
}

/// One rollout step: admit, decode one segment per lane, route results.
///
/// Lane `uid` draws from the random stream `(seed, step, uid)`, so the
/// outcome is the same under sequential and parallel execution.
pub fn rollout_step(
    state: &mut RolloutState,
    params: &PolicyParams,
    cfg: &RolloutConfig,
    eos: Token,
    seed: u64,
    exec: Exec,
) -> Result<RolloutSummary> {
    let carried_over = state.unfinished_pool.len();
    let groups_before = state.admitted_groups;
    let lanes = admit_prompts(state, cfg);
    if lanes.is_empty() {
        return Err(Error::EndOfData);
    }
    state.step += 1;
    let step = state.step;
    let seg_len = cfg.segment_len();
    let results = exec.map_owned(lanes, |mut traj| -> Result<(Trajectory, Termination, usize)> {
        let budget = seg_len.min(cfg.global_max_len - traj.response_len());
        let mut r = rng::stream(seed, rng::mix(&[step, traj.uid]));
        decode_segment(&mut traj, params, budget, cfg.temperature, eos, &mut r)?;
        let decoded = traj.segments.last().map_or(0, |s| s.tokens.len());
        let term = classify_termination(&traj, cfg, eos)?;
        match term {
            Termination::FinishedEos => traj.status = Status::FinishedEos,
            Termination::TruncatedGlobal => traj.status = Status::TruncatedGlobal,
            Termination::SegmentBoundary => {}
        }
        if traj.is_complete() {
            stamp_rollout_logprobs(&mut traj, params)?;
        }
        Ok((traj, term, decoded))
    });
    let mut summary = RolloutSummary {
        carried_over,
        new_groups: (state.admitted_groups - groups_before) as usize,
        ..Default::default()
    };
    for res in results {
        let (traj, term, decoded) = res?;
        summary.lanes += 1;
        summary.tokens_decoded += decoded;
        match term {
            Termination::FinishedEos => {
                summary.finished_eos += 1;
                state.experience_pool.push(traj);
            }
            Termination::TruncatedGlobal => {
                summary.truncated += 1;
                state.experience_pool.push(traj);
            }
            Termination::SegmentBoundary => state.unfinished_pool.push(traj),
        }
    }
    Ok(summary)
}

/// Remove and return every group whose members are all in the experience
/// pool, ordered by group id with members in admission order.
pub fn take_trainable_groups(state: &mut RolloutState, group_size: usize) -> Vec<Vec<Trajectory>> {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for t in &state.experience_pool {
        *counts.entry(t.group_id).or_default() += 1;
    }
    let (ready, waiting): (Vec<_>, Vec<_>) = std::mem::take(&mut state.experience_pool)
        .into_iter()
        .partition(|t| counts[&t.group_id] == group_size);
    state.experience_pool = waiting;
    let mut groups: BTreeMap<u64, Vec<Trajectory>> = BTreeMap::new();
    for t in ready {
        groups.entry(t.group_id).or_default().push(t);
    }
    groups
        .into_values()
        .map(|mut g| {
            g.sort_by_key(|t| t.member);
            g
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const V: usize = 6;
    const EOS: Token = 5;

    fn prompt(id: &str) -> Prompt {
        Prompt {
            id: id.into(),
            tokens: vec![0, 1],
            reference: "0".into(),
        }
    }

    /// Policy whose next token is fixed regardless of context.
    fn constant_policy(tok: Token) -> PolicyParams {
        let mut p = PolicyParams::zeros(V, 2).unwrap();
        let b = p.bias_feature();
        p.set_weight(tok, b, 60.0);
        p
    }

    fn cfg(global: usize, segs: usize, g: usize, batch: usize) -> RolloutConfig {
        RolloutConfig {
            global_max_len: global,
            segment_count: segs,
            group_size: g,
            prompt_batch: batch,
            temperature: 1.0,
        }
    }

    #[test]
    fn admission_arithmetic() {
        let c = cfg(32, 4, 8, 2);
        let mut s = RolloutState::new([prompt("a"), prompt("b"), prompt("c")]);
        let lanes = admit_prompts(&mut s, &c);
        assert_eq!(lanes.len(), 16);
        assert_eq!(s.prompt_queue.len(), 1);
        // all members of a group admitted together
        assert!(lanes[..8].iter().all(|t| t.group_id == lanes[0].group_id));
    }

    #[test]
    fn whole_group_admission_with_carryover() {
        let c = cfg(32, 4, 8, 2);
        let mut s = RolloutState::new([prompt("a"), prompt("b")]);
        let p = Arc::new(prompt("old"));
        for i in 0..10 {
            s.unfinished_pool.push(Trajectory::new(1000 + i, 99, i as usize, Arc::clone(&p)));
        }
        let lanes = admit_prompts(&mut s, &c);
        assert_eq!(lanes.len(), 10);
        assert!(lanes.iter().all(|t| t.group_id == 99));
        assert_eq!(s.prompt_queue.len(), 2);
    }

    #[test]
    fn single_segment_completes_everything() {
        let c = cfg(16, 1, 4, 2);
        let mut s = RolloutState::new((0..4).map(|i| prompt(&i.to_string())));
        let params = PolicyParams::zeros(V, 2).unwrap();
        while !s.is_drained() {
            rollout_step(&mut s, &params, &c, EOS, 11, Exec::Sequential).unwrap();
            assert!(s.unfinished_pool.is_empty());
        }
        assert_eq!(s.experience_pool.len(), 16);
        for t in &s.experience_pool {
            assert_eq!(t.segments.len(), 1);
            t.check_invariants(&c, EOS).unwrap();
        }
    }

    #[test]
    fn never_eos_passes_through_unfinished_pool_three_times() {
        let c = cfg(32, 4, 2, 1);
        let mut s = RolloutState::new([prompt("a")]);
        let params = constant_policy(2);
        for step in 1..=3 {
            let sum = rollout_step(&mut s, &params, &c, EOS, 1, Exec::Sequential).unwrap();
            assert_eq!(sum.completed(), 0, "step {step}");
            assert_eq!(s.unfinished_pool.len(), 2);
            assert!(s.experience_pool.is_empty());
        }
        let sum = rollout_step(&mut s, &params, &c, EOS, 1, Exec::Sequential).unwrap();
        assert_eq!(sum.truncated, 2);
        assert_eq!(s.step, 4);
        for t in &s.experience_pool {
            assert_eq!(t.status, Status::TruncatedGlobal);
            assert_eq!(t.segments.len(), 4);
            assert!(t.segments.iter().all(|seg| seg.tokens.len() == 8));
            t.check_invariants(&c, EOS).unwrap();
        }
        assert!(matches!(rollout_step(&mut s, &params, &c, EOS, 1, Exec::Sequential), Err(Error::EndOfData)));
    }

    #[test]
    fn eos_mid_segment_finishes_with_prior_length() {
        // emits 2 until the last two slots both hold 2, then EOS
        let mut p = PolicyParams::zeros(V, 3).unwrap();
        let b = p.bias_feature();
        p.set_weight(2, b, 40.0);
        // after [2, 2] in the last two slots emit EOS
        p.set_weight(EOS, p.slot_feature(1, 2), 25.0);
        p.set_weight(EOS, p.slot_feature(2, 2), 25.0);
        let c = cfg(128, 8, 2, 1);
        let mut s = RolloutState::new([prompt("a")]);
        rollout_step(&mut s, &p, &c, EOS, 3, Exec::Sequential).unwrap();
        for t in &s.experience_pool {
            assert_eq!(t.status, Status::FinishedEos);
            assert_eq!(t.response(), vec![2, 2, EOS]);
        }
    }

    #[test]
    fn eos_at_global_boundary_takes_precedence() {
        // exhaustive over short shapes: place EOS at each index of a 4-token cap
        let c = cfg(4, 2, 2, 1);
        let pr = Arc::new(prompt("a"));
        for len in 1..=4usize {
            for eos_at_end in [false, true] {
                let mut t = Trajectory::new(0, 0, 0, Arc::clone(&pr));
                let mut toks = vec![1; len];
                if eos_at_end {
                    *toks.last_mut().unwrap() = EOS;
                }
                t.segments.push(Segment {
                    gen_logprobs: vec![-0.1; len],
                    tokens: toks,
                    gen_version: 0,
                });
                let term = classify_termination(&t, &c, EOS).unwrap();
                let expect = if eos_at_end {
                    Termination::FinishedEos
                } else if len == 4 {
                    Termination::TruncatedGlobal
                } else {
                    Termination::SegmentBoundary
                };
                assert_eq!(term, expect, "len {len} eos {eos_at_end}");
            }
        }
        let mut t = Trajectory::new(0, 0, 0, pr);
        t.segments.push(Segment {
            tokens: vec![1; 5],
            gen_version: 0,
            gen_logprobs: vec![-0.1; 5],
        });
        assert!(matches!(classify_termination(&t, &c, EOS), Err(Error::Invariant(_))));
    }

    #[test]
    fn segment_boundary_at_16_of_128() {
        let c = cfg(128, 8, 2, 1);
        let mut t = Trajectory::new(0, 0, 0, Arc::new(prompt("a")));
        t.segments.push(Segment {
            tokens: vec![1; 16],
            gen_version: 0,
            gen_logprobs: vec![-0.2; 16],
        });
        assert_eq!(classify_termination(&t, &c, EOS).unwrap(), Termination::SegmentBoundary);
    }

    #[test]
    fn carryover_preserves_history_and_versions() {
        let c = cfg(32, 4, 2, 1);
        let mut s = RolloutState::new([prompt("a")]);
        let mut params = constant_policy(2);
        rollout_step(&mut s, &params, &c, EOS, 1, Exec::Sequential).unwrap();
        let before: Vec<_> = s.unfinished_pool.iter().map(|t| t.response()).collect();
        params.bump_version();
        rollout_step(&mut s, &params, &c, EOS, 1, Exec::Sequential).unwrap();
        for (t, prev) in s.unfinished_pool.iter().zip(&before) {
            assert_eq!(&t.response()[..8], &prev[..]);
            assert_eq!(t.segments[0].gen_version, 0);
            assert_eq!(t.segments[1].gen_version, 1);
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let c = cfg(24, 3, 4, 3);
        let mut p = PolicyParams::zeros(V, 2).unwrap();
        let b = p.bias_feature();
        p.set_weight(EOS, b, -1.5);
        let run = |exec| {
            let mut s = RolloutState::new((0..9).map(|i| prompt(&i.to_string())));
            while !s.is_drained() {
                rollout_step(&mut s, &p, &c, EOS, 77, exec).unwrap();
            }
            s.experience_pool.iter().map(|t| (t.uid, t.response())).collect::<Vec<_>>()
        };
        assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
    }

    #[test]
    fn trainable_groups_wait_for_all_members() {
        let c = cfg(32, 4, 2, 1);
        let mut s = RolloutState::default();
        let pr = Arc::new(prompt("a"));
        let mut t0 = Trajectory::new(0, 5, 0, Arc::clone(&pr));
        t0.status = Status::FinishedEos;
        s.experience_pool.push(t0.clone());
        assert!(take_trainable_groups(&mut s, c.group_size).is_empty());
        assert_eq!(s.experience_pool.len(), 1);
        let mut t1 = t0.clone();
        t1.member = 1;
        t1.uid = 1;
        s.experience_pool.insert(0, t1);
        let groups = take_trainable_groups(&mut s, c.group_size);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].iter().map(|t| t.member).collect::<Vec<_>>(), vec![0, 1]);
        assert!(s.experience_pool.is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(cfg(32, 3, 8, 1).validate().is_err());
        assert!(cfg(32, 4, 1, 1).validate().is_err());
        assert!(cfg(32, 4, 2, 1).validate().is_ok());
        let mut c = cfg(32, 4, 2, 1);
        c.temperature = 0.0;
        assert!(matches!(c.validate(), Err(Error::Validation(v)) if v.len() == 1));
    }
}
