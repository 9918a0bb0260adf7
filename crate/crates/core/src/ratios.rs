//! Token-level importance ratios for segmented trajectories.
//!
//! The numerator is always the current policy's temperature-1 probability
//! of the response token. The denominator depends on the mode:
//!
//! - `TOIS`: the rollout policy, valid only with a single segment.
//! - `SAIS`: the policy version that generated the token's own segment.
//! - `POIS`: the rollout policy active when the trajectory became trainable,
//!   applied to every token including earlier segments.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::rollout::{self, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RatioMode {
    #[serde(rename = "TOIS")]
    Tois,
    #[serde(rename = "SAIS")]
    Sais,
    #[serde(rename = "POIS")]
    Pois,
}

impl fmt::Display for RatioMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RatioMode::Tois => "TOIS",
            RatioMode::Sais => "SAIS",
            RatioMode::Pois => "POIS",
        })
    }
}

/// Per-token ratios aligned with the response.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenRatios(pub Vec<f64>);

impl TokenRatios {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// 1-based id of the segment containing response token `index`. Segment
/// ranges are half-open, so a boundary index belongs to the next segment.
pub fn segment_of(index: usize, traj: &Trajectory) -> Result<usize> {
    let mut start = 0;
    for (j, seg) in traj.segments.iter().enumerate() {
        let end = start + seg.tokens.len();
        if index < end {
            return Ok(j + 1);
        }
        start = end;
    }
    Err(Error::Input(format!("token index {index} outside response of length {start}")))
}

/// Stored log-probabilities used as the ratio denominator under `mode`.
pub fn denominator_logprobs(traj: &Trajectory, mode: RatioMode) -> Result<Vec<f64>> {
    if !traj.is_complete() {
        return Err(Error::State(format!("trajectory {} is not complete", traj.uid)));
    }
    match mode {
        RatioMode::Sais => Ok(traj.gen_logprobs()),
        RatioMode::Tois if traj.segments.len() > 1 => Err(Error::State(format!(
            "TOIS requires single-segment trajectories, trajectory {} has {}",
            traj.uid,
            traj.segments.len()
        ))),
        RatioMode::Tois | RatioMode::Pois => traj
            .final_rollout_logprobs
            .clone()
            .ok_or_else(|| Error::State(format!("trajectory {} has no rollout log-probs", traj.uid))),
    }
}

/// `exp(current − denominator)` per token, in log space.
pub fn ratios_from_logprobs(current: &[f64], traj: &Trajectory, mode: RatioMode) -> Result<TokenRatios> {
    let denom = denominator_logprobs(traj, mode)?;
    if denom.len() != current.len() {
        return Err(Error::State("log-prob length mismatch".into()));
    }
    current
        .iter()
        .zip(&denom)
        .map(|(n, d)| {
            let r = (n - d).exp();
            if r.is_finite() && r > 0.0 {
                Ok(r)
            } else {
                Err(Error::Numeric(format!("ratio {r} for trajectory {}", traj.uid)))
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(TokenRatios)
}

/// Importance ratios of a completed trajectory under the current `params`.
pub fn compute_ratios(traj: &Trajectory, params: &PolicyParams, mode: RatioMode) -> Result<TokenRatios> {
    // validate stored state before the fresh forward pass
    denominator_logprobs(traj, mode)?;
    let current = rollout::response_logprobs(params, traj)?;
    ratios_from_logprobs(&current, traj, mode)
}
