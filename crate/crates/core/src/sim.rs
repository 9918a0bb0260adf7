//! Cost model of synchronous batched decoding with segmented rollouts.
//!
//! Each step, every occupied lane decodes `min(remaining, segment_len)`
//! tokens and the step lasts `c · max_lane_tokens + h`. Lanes are refilled
//! at step boundaries: carried-over samples first, then whole groups of new
//! samples. A training step consumes one batch of `lanes` completed samples,
//! so the mean step time is total time divided by `samples / lanes`.

use rand::Rng as _;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::rng;

/// Output-length distribution in tokens, capped at `global_max_len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthDistribution {
    /// `short_frac` of samples have `short_len` tokens, the rest `long_len`.
    TwoPoint {
        short_frac: f64,
        short_len: usize,
        long_len: usize,
    },
    /// Lognormal in tokens, conditioned on `[1, global_max_len]`.
    TruncatedLognormal { mu: f64, sigma: f64 },
    /// Explicit lengths with non-negative weights.
    Histogram { lengths: Vec<usize>, weights: Vec<f64> },
}

impl LengthDistribution {
    pub fn problems(&self, global_max_len: usize) -> Vec<String> {
        let mut p = Vec::new();
        let in_range = |l: usize| l >= 1 && l <= global_max_len;
        match self {
            LengthDistribution::TwoPoint {
                short_frac,
                short_len,
                long_len,
            } => {
                if !(0.0..=1.0).contains(short_frac) {
                    p.push("two_point.short_frac must lie in [0, 1]".into());
                }
                if !in_range(*short_len) || !in_range(*long_len) {
                    p.push(format!("two_point lengths must lie in 1..={global_max_len}"));
                }
            }
            LengthDistribution::TruncatedLognormal { mu, sigma } => {
                if !mu.is_finite() || !(*sigma > 0.0 && sigma.is_finite()) {
                    p.push("truncated_lognormal needs finite mu and positive sigma".into());
                }
            }
            LengthDistribution::Histogram { lengths, weights } => {
                if lengths.is_empty() || lengths.len() != weights.len() {
                    p.push("histogram needs one weight per length".into());
                }
                if lengths.iter().any(|&l| !in_range(l)) {
                    p.push(format!("histogram lengths must lie in 1..={global_max_len}"));
                }
                if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || weights.iter().sum::<f64>() <= 0.0 {
                    p.push("histogram weights must be non-negative with positive sum".into());
                }
            }
        }
        p
    }

    /// Draw `n` lengths from a stream keyed by `seed`.
    pub fn sample(&self, n: usize, global_max_len: usize, seed: u64) -> Result<Vec<usize>> {
        let p = self.problems(global_max_len);
        if !p.is_empty() {
            return Err(Error::Validation(p));
        }
        let mut r = rng::stream(seed, rng::mix(&[0x51ab]));
        Ok(match self {
            LengthDistribution::TwoPoint {
                short_frac,
                short_len,
                long_len,
            } => (0..n)
                .map(|_| if r.random::<f64>() < *short_frac { *short_len } else { *long_len })
                .collect(),
            LengthDistribution::TruncatedLognormal { mu, sigma } => {
                let d = LogNormal::new(*mu, *sigma).map_err(|e| Error::Config(e.to_string()))?;
                let mut out = Vec::with_capacity(n);
                let mut tries = 0usize;
                while out.len() < n {
                    tries += 1;
                    if tries > 1000 * n.max(1) {
                        return Err(Error::Config("lognormal has almost no mass inside the length cap".into()));
                    }
                    let x = d.sample(&mut r).ceil();
                    if x >= 1.0 && x <= global_max_len as f64 {
                        out.push(x as usize);
                    }
                }
                out
            }
            LengthDistribution::Histogram { lengths, weights } => {
                let idx = rand::distr::weighted::WeightedIndex::new(weights).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| lengths[idx.sample(&mut r)]).collect()
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// Seconds per decoded token on the slowest lane.
    pub c: f64,
    /// Fixed seconds per step.
    pub h: f64,
    pub lanes: usize,
    pub group_size: usize,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            c: 1.0,
            h: 0.0,
            lanes: 128,
            group_size: 8,
        }
    }
}

impl CostModel {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.c > 0.0 && self.c.is_finite()) {
            p.push("simulate.cost.c must be positive".into());
        }
        if !(self.h >= 0.0 && self.h.is_finite()) {
            p.push("simulate.cost.h must be non-negative".into());
        }
        if self.group_size == 0 || self.lanes < self.group_size {
            p.push("simulate.cost.lanes must be at least group_size, which must be positive".into());
        }
        p
    }
}

/// A fixed list of output lengths, consumed in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Workload {
    pub lengths: Vec<usize>,
    pub global_max_len: usize,
}

impl Workload {
    pub fn new(lengths: Vec<usize>, global_max_len: usize) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Input("empty workload".into()));
        }
        if lengths.iter().any(|&l| l == 0 || l > global_max_len) {
            return Err(Error::Input(format!("workload lengths must lie in 1..={global_max_len}")));
        }
        Ok(Self { lengths, global_max_len })
    }

    fn fingerprint(&self) -> u64 {
        let mut parts = vec![self.global_max_len as u64, self.lengths.len() as u64];
        parts.extend(self.lengths.iter().map(|&l| l as u64));
        rng::mix(&parts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub segment_count: usize,
    /// Time per batch of `lanes` completed samples.
    pub mean_step_time: f64,
    pub total_time: f64,
    pub tokens_decoded: usize,
    pub rollout_steps: usize,
    pub utilization: f64,
    workload: u64,
    cost: (u64, u64, usize, usize),
}

/// Run the workload to exhaustion with `segment_count` segments.
pub fn simulate(workload: &Workload, segment_count: usize, cost: &CostModel) -> Result<SimResult> {
    let p = cost.problems();
    if !p.is_empty() {
        return Err(Error::Validation(p));
    }
    let l = workload.global_max_len;
    if segment_count == 0 || !l.is_multiple_of(segment_count) {
        return Err(Error::Config(format!("segment_count {segment_count} must divide {l}")));
    }
    let seg = l / segment_count;
    let g = cost.group_size;
    let mut next = 0usize;
    // remaining tokens of occupied lanes, carried-over samples first
    let mut active: Vec<usize> = Vec::with_capacity(cost.lanes);
    let mut total = 0.0;
    let mut tokens = 0usize;
    let mut steps = 0usize;
    let mut capacity_tokens = 0usize;
    while next < workload.lengths.len() || !active.is_empty() {
        while cost.lanes - active.len() >= g.min(workload.lengths.len() - next).max(1) && next < workload.lengths.len() {
            let end = (next + g).min(workload.lengths.len());
            active.extend_from_slice(&workload.lengths[next..end]);
            next = end;
        }
        let mut longest = 0;
        for rem in active.iter_mut() {
            let d = (*rem).min(seg);
            *rem -= d;
            tokens += d;
            longest = longest.max(d);
        }
        active.retain(|&r| r > 0);
        total += cost.c * longest as f64 + cost.h;
        capacity_tokens += cost.lanes * longest;
        steps += 1;
    }
    let batches = workload.lengths.len() as f64 / cost.lanes as f64;
    Ok(SimResult {
        segment_count,
        mean_step_time: total / batches,
        total_time: total,
        tokens_decoded: tokens,
        rollout_steps: steps,
        utilization: tokens as f64 / capacity_tokens as f64,
        workload: workload.fingerprint(),
        cost: (cost.c.to_bits(), cost.h.to_bits(), cost.lanes, cost.group_size),
    })
}

/// Baseline mean step time over variant mean step time.
pub fn speedup(baseline: &SimResult, variant: &SimResult) -> Result<f64> {
    if baseline.workload != variant.workload || baseline.cost != variant.cost {
        return Err(Error::Input("speedup needs the same workload and cost model".into()));
    }
    Ok(baseline.mean_step_time / variant.mean_step_time)
}

/// Closed-form speedup of `k` segments over one for a two-point mixture
/// with many lanes and no overhead: every step lasts a full segment, and a
/// sample of `n` tokens occupies a lane for `ceil(n / segment_len)` steps.
pub fn two_point_speedup_limit(short_frac: f64, short_len: usize, long_len: usize, global_max_len: usize, k: usize) -> f64 {
    let seg = global_max_len / k;
    let steps = |n: usize| n.div_ceil(seg) as f64;
    let lane_steps = short_frac * steps(short_len) + (1.0 - short_frac) * steps(long_len);
    let baseline = long_len as f64;
    baseline / (lane_steps * seg as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub target_k: usize,
    pub target_speedup: f64,
    /// Grid points within this distance of the target form the calibrated set.
    pub tolerance: f64,
    pub short_frac_min: f64,
    pub short_frac_max: f64,
    pub short_frac_step: f64,
    /// Short lengths are `i · global_max_len / short_len_divisions` for
    /// `i = 1 .. short_len_divisions`.
    pub short_len_divisions: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            target_k: 2,
            target_speedup: 1.6,
            tolerance: 0.02,
            short_frac_min: 0.5,
            short_frac_max: 0.95,
            short_frac_step: 0.01,
            short_len_divisions: 32,
        }
    }
}

impl CalibrationConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.target_k < 2 {
            p.push("simulate.calibration.target_k must be at least 2".into());
        }
        if !(self.target_speedup >= 1.0) || !(self.tolerance > 0.0) {
            p.push("simulate.calibration needs target_speedup >= 1 and positive tolerance".into());
        }
        if !(0.0..=1.0).contains(&self.short_frac_min)
            || !(0.0..=1.0).contains(&self.short_frac_max)
            || self.short_frac_min > self.short_frac_max
            || !(self.short_frac_step > 0.0)
        {
            p.push("simulate.calibration short_frac range is invalid".into());
        }
        if self.short_len_divisions < 2 {
            p.push("simulate.calibration.short_len_divisions must be at least 2".into());
        }
        p
    }
}

/// One grid point of the calibration search with its predicted speedups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub short_frac: f64,
    pub short_len: usize,
    /// `(segment_count, speedup)` for each requested segment count.
    pub speedups: Vec<(usize, f64)>,
}

impl GridPoint {
    pub fn speedup_at(&self, k: usize) -> Option<f64> {
        self.speedups.iter().find(|(kk, _)| *kk == k).map(|&(_, s)| s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub best: GridPoint,
    /// Grid points whose target-k speedup is within tolerance.
    pub calibrated: Vec<GridPoint>,
    pub grid_size: usize,
}

impl Calibration {
    /// Mean, min and max speedup at `k` over the calibrated set.
    pub fn predicted(&self, k: usize) -> Option<(f64, f64, f64)> {
        let v: Vec<f64> = self.calibrated.iter().filter_map(|g| g.speedup_at(k)).collect();
        if v.is_empty() {
            return None;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some((mean, min, max))
    }
}

/// Speedups over one segment for each `k` on a workload.
pub fn speedup_table(workload: &Workload, ks: &[usize], cost: &CostModel) -> Result<Vec<(SimResult, f64)>> {
    let base = simulate(workload, 1, cost)?;
    ks.iter()
        .map(|&k| {
            let r = simulate(workload, k, cost)?;
            let s = speedup(&base, &r)?;
            Ok((r, s))
        })
        .collect()
}

/// Grid search over two-point mixtures (long samples at the cap) for the
/// ones matching the target speedup. All grid points share the uniform
/// draws behind the workload so they differ only in the parameters.
pub fn calibrate(
    cal: &CalibrationConfig,
    cost: &CostModel,
    global_max_len: usize,
    samples: usize,
    ks: &[usize],
    seed: u64,
    exec: Exec,
) -> Result<Calibration> {
    let mut p = cal.problems();
    p.extend(cost.problems());
    if !p.is_empty() {
        return Err(Error::Validation(p));
    }
    if samples == 0 {
        return Err(Error::Input("empty workload".into()));
    }
    let mut r = rng::stream(seed, rng::mix(&[0xca1b]));
    let uniforms: Vec<f64> = (0..samples).map(|_| r.random::<f64>()).collect();
    let mut grid = Vec::new();
    let n_frac = ((cal.short_frac_max - cal.short_frac_min) / cal.short_frac_step + 1e-9).floor() as usize + 1;
    for i in 0..n_frac {
        let q = cal.short_frac_min + i as f64 * cal.short_frac_step;
        for j in 1..cal.short_len_divisions {
            let short_len = j * global_max_len / cal.short_len_divisions;
            if short_len >= 1 {
                grid.push((q, short_len));
            }
        }
    }
    let mut ks_all: Vec<usize> = ks.to_vec();
    if !ks_all.contains(&cal.target_k) {
        ks_all.push(cal.target_k);
    }
    let points = exec
        .map(&grid, |&(q, short_len)| -> Result<GridPoint> {
            let lengths = uniforms.iter().map(|&u| if u < q { short_len } else { global_max_len }).collect();
            let w = Workload::new(lengths, global_max_len)?;
            let table = speedup_table(&w, &ks_all, cost)?;
            Ok(GridPoint {
                short_frac: q,
                short_len,
                speedups: ks_all.iter().copied().zip(table.into_iter().map(|(_, s)| s)).collect(),
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let err = |g: &GridPoint| (g.speedup_at(cal.target_k).unwrap_or(f64::NAN) - cal.target_speedup).abs();
    let best = points
        .iter()
        .min_by(|a, b| err(a).total_cmp(&err(b)))
        .cloned()
        .ok_or_else(|| Error::Input("empty calibration grid".into()))?;
    let calibrated: Vec<GridPoint> = points.iter().filter(|g| err(g) <= cal.tolerance).cloned().collect();
    Ok(Calibration {
        best,
        calibrated,
        grid_size: points.len(),
    })
}
