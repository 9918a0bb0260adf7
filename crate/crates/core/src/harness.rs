//! Orchestration behind the command-line subcommands.
//!
//! [`train_loop`] runs rollout → reward → filter → advantage → ratios →
//! mask → update for `total_steps` steps without touching the filesystem;
//! the `cmd_*` functions wrap it and the other modules with artifact I/O.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::{Command, RunConfig};
use crate::data::{self, DatasetRecord, Pipeline};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRow};
use crate::par::Exec;
use crate::policy::{PolicyParams, Token};
use crate::reward::{self, RuleChecker, RULE_CHECKER_ID};
use crate::rng;
use crate::rollout::{self, Prompt, RolloutConfig, RolloutState, Trajectory};
use crate::sim::{self, LengthDistribution, Workload};
use crate::tasks::{self, InitKind, TaskVocab};
use crate::trainer::{self, Adam, Group, Masking};

/// Diagnostics of one training step beyond the metrics row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepDiagnostics {
    /// Largest `|r − 1|` over the batch before the step's first update.
    pub pre_update_max_ratio_dev: Option<f64>,
    /// `(mean, population std)` of each retained group's advantages.
    pub advantage_moments: Vec<(f64, f64)>,
    /// Consumed groups whose rewards were all equal.
    pub uniform_groups: usize,
    pub updates: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub initial: PolicyParams,
    pub final_params: PolicyParams,
    /// Parameters at each snapshot step.
    pub snapshots: Vec<(u64, PolicyParams)>,
}

/// Everything a run needs that is derived from the config and seed.
pub struct RunSetup {
    pub tv: TaskVocab,
    pub checker: RuleChecker,
    pub train_records: Vec<DatasetRecord>,
    pub eval_records: Vec<DatasetRecord>,
    pub train_prompts: Vec<Arc<Prompt>>,
    pub eval_prompts: Vec<Prompt>,
    pub initial: PolicyParams,
}

pub fn setup(cfg: &RunConfig, seed: u64) -> Result<RunSetup> {
    let tv = TaskVocab::new(cfg.tasks.filler_count)?;
    let checker = RuleChecker::new(&cfg.checker)?;
    let train_records = tasks::generate_tasks(&cfg.tasks, cfg.tasks.train_size, seed, 0)?;
    let eval_records = tasks::generate_tasks(&cfg.tasks, cfg.tasks.eval_size, seed, 1)?;
    let train_prompts = tasks::to_prompts(&train_records, &tv)?.into_iter().map(Arc::new).collect();
    let eval_prompts = tasks::to_prompts(&eval_records, &tv)?;
    let initial = initial_params(cfg, &tv)?;
    Ok(RunSetup {
        tv,
        checker,
        train_records,
        eval_records,
        train_prompts,
        eval_prompts,
        initial,
    })
}

pub fn initial_params(cfg: &RunConfig, tv: &TaskVocab) -> Result<PolicyParams> {
    match cfg.policy.init {
        InitKind::Zero => PolicyParams::zeros(tv.vocab.size(), cfg.policy.context_width),
        InitKind::Prior => tasks::prior_params(tv, cfg.policy.context_width, &cfg.policy.prior),
    }
}

/// Cycles through the training prompts, reshuffled every epoch.
struct PromptFeed {
    prompts: Vec<Arc<Prompt>>,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl PromptFeed {
    fn new(prompts: Vec<Arc<Prompt>>, seed: u64) -> Self {
        let mut f = Self {
            order: (0..prompts.len()).collect(),
            prompts,
            pos: 0,
            epoch: 0,
            seed,
        };
        f.shuffle();
        f
    }

    fn shuffle(&mut self) {
        let mut r = rng::stream(self.seed, rng::mix(&[0xfeed, self.epoch]));
        self.order.shuffle(&mut r);
    }

    fn next(&mut self) -> Arc<Prompt> {
        if self.pos == self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.shuffle();
        }
        let p = Arc::clone(&self.prompts[self.order[self.pos]]);
        self.pos += 1;
        p
    }
}

fn trajectory_rewards(trajs: &[Trajectory], checker: &RuleChecker, tv: &TaskVocab) -> Vec<u8> {
    trajs
        .iter()
        .map(|t| reward::compute_reward(t, &t.prompt.reference, checker, &tv.vocab))
        .collect()
}

/// Run the training loop for `cfg.total_steps` steps with `seed`.
pub fn train_loop(cfg: &RunConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate(Command::Train)?;
    let s = setup(cfg, seed)?;
    train_loop_from(cfg, seed, &s, s.initial.clone())
}

pub fn train_loop_from(cfg: &RunConfig, seed: u64, s: &RunSetup, initial: PolicyParams) -> Result<TrainOutcome> {
    let exec = cfg.exec;
    let rc = &cfg.rollout;
    let tc = &cfg.trainer;
    let eos = s.tv.vocab.eos();
    let mut params = initial.clone();
    let mut opt = Adam::new(params.weights().len(), tc);
    let mut state = RolloutState::default();
    let mut feed = PromptFeed::new(s.train_prompts.clone(), seed);
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut diagnostics = Vec::new();
    let mut snapshots = Vec::new();

    for step in 1..=cfg.total_steps {
        while state.prompt_queue.len() < rc.prompt_batch {
            state.enqueue(feed.next());
        }
        let summary = rollout::rollout_step(&mut state, &params, rc, eos, seed, exec)?;
        let experience_pool_size = state.experience_pool.len();
        let ready = rollout::take_trainable_groups(&mut state, rc.group_size);

        // Refresh the rollout log-probs of released groups under the current
        // policy, so members that finished in earlier steps share it.
        let ready = exec.map_owned(ready, |mut g| -> Result<Vec<Trajectory>> {
            for t in g.iter_mut() {
                rollout::stamp_rollout_logprobs(t, &params)?;
            }
            Ok(g)
        });
        let mut groups = Vec::with_capacity(ready.len());
        let mut rewards_all = Vec::new();
        for g in ready {
            let g = g?;
            let rewards = trajectory_rewards(&g, &s.checker, &s.tv);
            rewards_all.extend(rewards.iter().map(|&r| r as f64));
            groups.push(Group::new(g, rewards)?);
        }
        let consumed: Vec<&Trajectory> = groups.iter().flat_map(|g| g.trajectories.iter()).collect();
        let entropies = exec
            .map(&consumed, |t| trainer::response_mean_entropy(t, &params))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

        let mut diag = StepDiagnostics {
            uniform_groups: groups.iter().filter(|g| g.correct() == 0 || g.correct() == g.trajectories.len()).count(),
            ..Default::default()
        };
        let filtered = trainer::dynamic_sampling_filter(groups);
        let mut retained = filtered.retained;
        for g in retained.iter_mut() {
            g.assign_advantages()?;
            let a = g.advantages.as_ref().expect("assigned");
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            diag.advantage_moments.push((mean, std));
        }

        let (mut masked, mut clipped, mut loss) = (f64::NAN, f64::NAN, f64::NAN);
        if !retained.is_empty() {
            for u in 0..tc.updates_per_step {
                let out = trainer::batch_loss_and_grad(&retained, &params, tc, exec)?;
                if u == 0 {
                    diag.pre_update_max_ratio_dev = Some(out.stats.max_ratio_deviation);
                    masked = out.stats.masked_fraction();
                    clipped = out.stats.clip_fraction();
                    loss = out.loss();
                }
                params = trainer::apply_update(&params, &out.grad, &mut opt)
                    .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
                diag.updates += 1;
            }
        }

        rows.push(MetricsRow {
            step,
            mean_reward: metrics::finite_mean(&rewards_all),
            mean_entropy: metrics::finite_mean(&entropies),
            masked_fraction: masked,
            clip_fraction: clipped,
            experience_pool_size,
            unfinished_pool_size: state.unfinished_pool.len(),
            retained_groups: Some(retained.len()),
            dropped_groups: filtered.dropped.len(),
            completed: Some(summary.completed()),
            truncated: Some(summary.truncated),
            loss,
            wall_time: cfg.train.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        });
        diagnostics.push(diag);
        if cfg.train.snapshot_every > 0 && step % cfg.train.snapshot_every == 0 {
            snapshots.push((step, params.clone()));
        }
    }
    Ok(TrainOutcome {
        rows,
        diagnostics,
        initial,
        final_params: params,
        snapshots,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuestionResult {
    pub id: String,
    pub correct: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean reward over all `k` samples of every question (avg@k).
    pub accuracy: f64,
    pub k: usize,
    pub temperature: f64,
    pub questions: Vec<QuestionResult>,
}

/// Sample `k` full responses per prompt and score them.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &PolicyParams,
    prompts: &[Prompt],
    tv: &TaskVocab,
    checker: &RuleChecker,
    k: usize,
    temperature: f64,
    global_max_len: usize,
    seed: u64,
    exec: Exec,
) -> Result<EvalReport> {
    let eos: Token = tv.vocab.eos();
    let cfg = RolloutConfig {
        global_max_len,
        segment_count: 1,
        group_size: k.max(2),
        prompt_batch: 1,
        temperature,
    };
    let results = exec.map_range(prompts.len(), |i| -> Result<QuestionResult> {
        let prompt = Arc::new(prompts[i].clone());
        let mut correct = 0;
        for j in 0..k {
            let mut t = Trajectory::new(j as u64, i as u64, j, Arc::clone(&prompt));
            let mut r = rng::stream(seed, rng::mix(&[0xe7a1, i as u64, j as u64]));
            rollout::decode_segment(&mut t, params, global_max_len, temperature, eos, &mut r)?;
            t.status = match rollout::classify_termination(&t, &cfg, eos)? {
                rollout::Termination::FinishedEos => rollout::Status::FinishedEos,
                _ => rollout::Status::TruncatedGlobal,
            };
            correct += reward::compute_reward(&t, &prompt.reference, checker, &tv.vocab) as usize;
        }
        Ok(QuestionResult {
            id: prompt.id.clone(),
            correct,
            k,
        })
    });
    let questions = results.into_iter().collect::<Result<Vec<_>>>()?;
    let total: usize = questions.iter().map(|q| q.correct).sum();
    let accuracy = if questions.is_empty() {
        0.0
    } else {
        total as f64 / (questions.len() * k) as f64
    };
    Ok(EvalReport {
        accuracy,
        k,
        temperature,
        questions,
    })
}

/// Entropy-band outcome for one seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BandSeed {
    pub seed: u64,
    pub baseline_min: f64,
    pub baseline_max: f64,
    pub sigma: f64,
    pub worst_low: f64,
    pub worst_high: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BandReport {
    pub window: usize,
    pub seeds: Vec<BandSeed>,
    pub pass: bool,
}

/// For each seed: run without masking, set `sigma` to the midpoint of the
/// running-mean entropy range, then run with dynamic masking and check that
/// the running mean over the final two-thirds stays within ±50% of `sigma`.
pub fn entropy_band(cfg: &RunConfig, seeds: &[u64], window: usize) -> Result<BandReport> {
    let mut out = Vec::new();
    for &seed in seeds {
        let mut base = cfg.clone();
        base.trainer.masking = Masking::Off;
        let b = train_loop(&base, seed)?;
        let h: Vec<f64> = b.rows.iter().map(|r| r.mean_entropy).collect();
        let rm = metrics::running_mean(&h, window);
        let finite = rm.iter().copied().filter(|x| x.is_finite());
        let lo = finite.clone().fold(f64::INFINITY, f64::min);
        let hi = finite.fold(f64::NEG_INFINITY, f64::max);
        let sigma = 0.5 * (lo + hi);
        let mut dyn_cfg = cfg.clone();
        dyn_cfg.trainer.masking = Masking::Dynamic;
        dyn_cfg.trainer.sigma = sigma;
        let d = train_loop(&dyn_cfg, seed)?;
        let h: Vec<f64> = d.rows.iter().map(|r| r.mean_entropy).collect();
        let rm = metrics::running_mean(&h, window);
        let tail = &rm[rm.len() / 3..];
        let worst_low = tail.iter().copied().fold(f64::INFINITY, f64::min);
        let worst_high = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pass = !tail.is_empty()
            && tail.iter().all(|v| v.is_finite() && (*v - sigma).abs() <= 0.5 * sigma);
        out.push(BandSeed {
            seed,
            baseline_min: lo,
            baseline_max: hi,
            sigma,
            worst_low,
            worst_high,
            pass,
        });
    }
    let pass = !out.is_empty() && out.iter().all(|s| s.pass);
    Ok(BandReport {
        window,
        seeds: out,
        pass,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Load a JSON parameter snapshot, re-checking shape and finiteness.
pub fn load_params(path: &Path) -> Result<PolicyParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let p: PolicyParams = serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    PolicyParams::from_weights(p.vocab_size(), p.context_width(), p.weights().to_vec(), p.version())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    checker_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    ratio_mode: Option<String>,
    artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    results: Option<serde_json::Value>,
    notes: Vec<&'a str>,
    config: String,
}

fn write_manifest(out: &Path, m: &Manifest) -> Result<()> {
    write(&out.join("manifest.json"), to_json(m)?)
}

const EVAL_NOTE: &str = "toy evaluation samples with temperature only; no top-p or top-k";

/// `train`: metrics CSV, snapshots, before/after accuracy and the manifest.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate(Command::Train)?;
    ensure_dir(out)?;
    let seed = cfg.seed;
    let header = metrics::header_line(&cfg.trainer.ratio_mode.to_string(), masking_name(cfg.trainer.masking));
    let mut artifacts = vec!["metrics.csv".to_string()];
    let mut manifest = Manifest {
        command: "train",
        version: env!("CARGO_PKG_VERSION"),
        seed,
        checker_id: RULE_CHECKER_ID,
        ratio_mode: Some(cfg.trainer.ratio_mode.to_string()),
        artifacts: artifacts.clone(),
        results: None,
        notes: vec![EVAL_NOTE],
        config: cfg.to_toml(),
    };
    // the manifest exists even if the run aborts
    write_manifest(out, &manifest)?;
    write(&out.join("metrics.csv"), metrics::write_log(&header, &[])?)?;
    if cfg.total_steps == 0 {
        return Ok(());
    }
    let s = setup(cfg, seed)?;
    let result = train_loop_from(cfg, seed, &s, s.initial.clone());
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            manifest.results = Some(serde_json::json!({ "error": e.to_string() }));
            write_manifest(out, &manifest)?;
            return Err(e);
        }
    };
    write(&out.join("metrics.csv"), metrics::write_log(&header, &outcome.rows)?)?;
    for (step, p) in &outcome.snapshots {
        let name = format!("params_step{step:05}.json");
        write(&out.join(&name), to_json(p)?)?;
        artifacts.push(name);
    }
    write(&out.join("params_final.json"), to_json(&outcome.final_params)?)?;
    artifacts.push("params_final.json".into());

    let eval = |p: &PolicyParams| {
        evaluate(
            p,
            &s.eval_prompts,
            &s.tv,
            &s.checker,
            cfg.train.eval_k,
            cfg.rollout.temperature,
            cfg.rollout.global_max_len,
            seed,
            cfg.exec,
        )
    };
    let before = eval(&outcome.initial)?;
    let after = eval(&outcome.final_params)?;
    let mut results = serde_json::json!({
        "eval_accuracy_initial": before.accuracy,
        "eval_accuracy_final": after.accuracy,
        "eval_k": cfg.train.eval_k,
        "max_pre_update_ratio_deviation": outcome
            .diagnostics
            .iter()
            .filter_map(|d| d.pre_update_max_ratio_dev)
            .fold(0.0, f64::max),
    });
    if !cfg.train.band_seeds.is_empty() {
        let band = entropy_band(cfg, &cfg.train.band_seeds, cfg.train.band_window)?;
        results["entropy_band"] = serde_json::to_value(&band)?;
    }
    manifest.artifacts = artifacts;
    manifest.results = Some(results);
    write_manifest(out, &manifest)
}

fn masking_name(m: Masking) -> &'static str {
    match m {
        Masking::Off => "off",
        Masking::Always => "always",
        Masking::Dynamic => "dynamic",
    }
}

/// Outcome of `simulate`: one row per segment count.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimRow {
    pub segment_count: usize,
    pub mean_step_time: f64,
    pub speedup: f64,
    pub utilization: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimulateOutcome {
    pub rows: Vec<SimRow>,
    pub distribution: LengthDistribution,
    pub calibration: Option<sim::Calibration>,
    /// `(segment_count, mean, min, max)` speedup over the calibrated set.
    pub predicted: Vec<(usize, f64, f64, f64)>,
}

pub fn run_simulation(cfg: &RunConfig) -> Result<SimulateOutcome> {
    cfg.validate(Command::Simulate)?;
    let s = &cfg.simulate;
    let (distribution, calibration) = if s.calibrate {
        let c = sim::calibrate(
            &s.calibration,
            &s.cost,
            s.global_max_len,
            s.samples,
            &s.segment_counts,
            cfg.seed,
            cfg.exec,
        )?;
        let d = LengthDistribution::TwoPoint {
            short_frac: c.best.short_frac,
            short_len: c.best.short_len,
            long_len: s.global_max_len,
        };
        (d, Some(c))
    } else {
        (s.distribution.clone().expect("validated"), None)
    };
    let lengths = match (&calibration, &distribution) {
        // the calibration workload is built from the same uniform draws
        (Some(c), _) => {
            use rand::Rng as _;
            let mut r = rng::stream(cfg.seed, rng::mix(&[0xca1b]));
            (0..s.samples)
                .map(|_| {
                    if r.random::<f64>() < c.best.short_frac {
                        c.best.short_len
                    } else {
                        s.global_max_len
                    }
                })
                .collect()
        }
        (None, d) => d.sample(s.samples, s.global_max_len, cfg.seed)?,
    };
    let w = Workload::new(lengths, s.global_max_len)?;
    let table = sim::speedup_table(&w, &s.segment_counts, &s.cost)?;
    let rows = table
        .into_iter()
        .map(|(r, sp)| SimRow {
            segment_count: r.segment_count,
            mean_step_time: r.mean_step_time,
            speedup: sp,
            utilization: r.utilization,
        })
        .collect();
    let predicted = calibration
        .as_ref()
        .map(|c| {
            s.segment_counts
                .iter()
                .filter_map(|&k| c.predicted(k).map(|(m, lo, hi)| (k, m, lo, hi)))
                .collect()
        })
        .unwrap_or_default();
    Ok(SimulateOutcome {
        rows,
        distribution,
        calibration,
        predicted,
    })
}

/// `simulate`: speedup CSV plus the calibration used.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let o = run_simulation(cfg)?;
    ensure_dir(out)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &o.rows {
        w.serialize(r).map_err(|e| Error::Input(e.to_string()))?;
    }
    let csv_bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    write(&out.join("speedup.csv"), csv_bytes)?;
    let cal = serde_json::json!({
        "distribution": o.distribution,
        "best": o.calibration.as_ref().map(|c| &c.best),
        "calibrated_set_size": o.calibration.as_ref().map(|c| c.calibrated.len()),
        "grid_size": o.calibration.as_ref().map(|c| c.grid_size),
        "calibrated_set_speedups": o.predicted.iter().map(|(k, m, lo, hi)| serde_json::json!({
            "segment_count": k, "mean": m, "min": lo, "max": hi
        })).collect::<Vec<_>>(),
    });
    write(&out.join("calibration.json"), to_json(&cal)?)?;
    write_manifest(
        out,
        &Manifest {
            command: "simulate",
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            checker_id: RULE_CHECKER_ID,
            ratio_mode: None,
            artifacts: vec!["speedup.csv".into(), "calibration.json".into()],
            results: None,
            notes: vec![],
            config: cfg.to_toml(),
        },
    )
}

/// `clean`: cleaned JSONL, JSON report and text summary.
pub fn cmd_clean(cfg: &RunConfig, out: &Path) -> Result<data::PipelineReport> {
    cfg.validate(Command::Clean)?;
    let input_path = cfg.clean.input.as_ref().expect("validated");
    let input = fs::read_to_string(input_path).map_err(|e| Error::io(input_path, e))?;
    let checker = RuleChecker::new(&cfg.checker)?;
    let pipeline = Pipeline::new(&cfg.clean.pipeline, &checker)?;
    let res = pipeline.run(&input, cfg.exec)?;
    ensure_dir(out)?;
    write(&out.join("cleaned.jsonl"), &res.jsonl)?;
    write(&out.join("report.json"), to_json(&res.report)?)?;
    write(&out.join("report.txt"), res.report.summary())?;
    write_manifest(
        out,
        &Manifest {
            command: "clean",
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            checker_id: RULE_CHECKER_ID,
            ratio_mode: None,
            artifacts: vec!["cleaned.jsonl".into(), "report.json".into(), "report.txt".into()],
            results: None,
            notes: vec![],
            config: cfg.to_toml(),
        },
    )?;
    Ok(res.report)
}

/// `eval`: avg@k accuracy with a per-question breakdown.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    cfg.validate(Command::Eval)?;
    let tv = TaskVocab::new(cfg.tasks.filler_count)?;
    let checker = RuleChecker::new(&cfg.checker)?;
    let records = match &cfg.eval.dataset {
        Some(p) => read_records(p)?,
        None => tasks::generate_tasks(&cfg.tasks, cfg.tasks.eval_size, cfg.seed, 1)?,
    };
    let prompts = tasks::to_prompts(&records, &tv)?;
    let params = match &cfg.eval.params {
        Some(p) => load_params(p)?,
        None => initial_params(cfg, &tv)?,
    };
    if params.vocab_size() != tv.vocab.size() {
        return Err(Error::Input(format!(
            "snapshot vocabulary {} does not match task vocabulary {}",
            params.vocab_size(),
            tv.vocab.size()
        )));
    }
    let report = evaluate(
        &params,
        &prompts,
        &tv,
        &checker,
        cfg.eval.k,
        cfg.eval.temperature,
        cfg.rollout.global_max_len,
        cfg.seed,
        cfg.exec,
    )?;
    ensure_dir(out)?;
    write(&out.join("eval.json"), to_json(&report)?)?;
    write_manifest(
        out,
        &Manifest {
            command: "eval",
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            checker_id: RULE_CHECKER_ID,
            ratio_mode: None,
            artifacts: vec!["eval.json".into()],
            results: Some(serde_json::json!({ "accuracy": report.accuracy, "k": report.k })),
            notes: vec![EVAL_NOTE],
            config: cfg.to_toml(),
        },
    )?;
    Ok(report)
}

/// Read a JSONL dataset; any malformed line is an input error.
pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Resolve `--out`, defaulting to `runs/<command>-<seed>`.
pub fn default_out(cmd: &str, seed: u64) -> PathBuf {
    PathBuf::from("runs").join(format!("{cmd}-{seed}"))
}
