//! JSONL dataset cleaning: reference normalisation, sub-question, long
//! reference, easy-question and inconsistent-reference filters, with an
//! audit report that accounts for every input line.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::reward::{self, AnswerPair, EquivalenceChecker};
use crate::rng;
use crate::tasks;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub question: String,
    pub reference_answer: String,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl DatasetRecord {
    fn problems(&self) -> Option<String> {
        if self.id.trim().is_empty() {
            Some("empty id".into())
        } else if self.question.trim().is_empty() {
            Some("empty question".into())
        } else if self.reference_answer.trim().is_empty() {
            Some("empty reference_answer".into())
        } else {
            None
        }
    }
}

/// Write records as JSONL.
pub fn to_jsonl(records: &[DatasetRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Transform,
    NormalizeReference,
    MultiSubquestion,
    LongReference,
    Easy,
    InconsistentReference,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Transform => "transform",
            Stage::NormalizeReference => "normalize_reference",
            Stage::MultiSubquestion => "multi_subquestion",
            Stage::LongReference => "long_reference",
            Stage::Easy => "easy",
            Stage::InconsistentReference => "inconsistent_reference",
        }
    }
}

/// Why a record was removed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    MultipleSubquestions,
    LongReference,
    TooEasy,
    InconsistentReference,
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reason::MultipleSubquestions => "multiple_subquestions",
            Reason::LongReference => "long_reference",
            Reason::TooEasy => "too_easy",
            Reason::InconsistentReference => "inconsistent_reference",
        })
    }
}

/// Source of sampled answers for the easy and consistency filters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SolverSpec {
    /// Canned answers read from `meta.answers.<name>`.
    Fixture { name: String },
    /// Ground-truth evaluator for modular chains, wrong with probability
    /// `noise`.
    NoisyOracle {
        name: String,
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl SolverSpec {
    pub fn name(&self) -> &str {
        match self {
            SolverSpec::Fixture { name } | SolverSpec::NoisyOracle { name, .. } => name,
        }
    }
}

pub trait Solver: Send + Sync {
    fn name(&self) -> &str;
    /// `k` sampled answers for `record`.
    fn solve(&self, record: &DatasetRecord, k: usize) -> std::result::Result<Vec<String>, String>;
}

struct FixtureSolver {
    name: String,
}

impl Solver for FixtureSolver {
    fn name(&self) -> &str {
        &self.name
    }

    fn solve(&self, record: &DatasetRecord, k: usize) -> std::result::Result<Vec<String>, String> {
        let answers = record
            .meta
            .get("answers")
            .and_then(|a| a.get(&self.name))
            .and_then(|a| a.as_array())
            .ok_or_else(|| format!("no canned answers for solver '{}'", self.name))?;
        let answers: Vec<String> = answers
            .iter()
            .map(|a| a.as_str().map(String::from).ok_or_else(|| "non-string canned answer".to_string()))
            .collect::<std::result::Result<_, _>>()?;
        if answers.len() < k {
            return Err(format!("solver '{}' has {} canned answers, {k} required", self.name, answers.len()));
        }
        Ok(answers[..k].to_vec())
    }
}

struct NoisyOracle {
    name: String,
    noise: f64,
    seed: u64,
}

impl Solver for NoisyOracle {
    fn name(&self) -> &str {
        &self.name
    }

    fn solve(&self, record: &DatasetRecord, k: usize) -> std::result::Result<Vec<String>, String> {
        use rand::Rng as _;
        let truth = tasks::evaluate_question(&record.question).map_err(|e| e.to_string())?;
        let (_, m) = tasks::split_question(&record.question).map_err(|e| e.to_string())?;
        let key = record.id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        let mut r = rng::stream(self.seed, rng::mix(&[key]));
        Ok((0..k)
            .map(|_| {
                if m > 1 && r.random_bool(self.noise) {
                    ((truth + r.random_range(1..m)) % m).to_string()
                } else {
                    truth.to_string()
                }
            })
            .collect())
    }
}

pub fn build_solver(spec: &SolverSpec) -> Box<dyn Solver> {
    match spec {
        SolverSpec::Fixture { name } => Box::new(FixtureSolver { name: name.clone() }),
        SolverSpec::NoisyOracle { name, noise, seed } => Box::new(NoisyOracle {
            name: name.clone(),
            noise: *noise,
            seed: *seed,
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Stages applied in this order; an empty list passes records through.
    pub stages: Vec<Stage>,
    pub max_reference_len: usize,
    pub min_question_marks: usize,
    /// Regexes marking enumerated sub-questions, in addition to the
    /// question-mark count.
    pub enumerator_patterns: Vec<String>,
    pub easy_k: usize,
    pub easy_solver: Option<SolverSpec>,
    pub ensemble: Vec<SolverSpec>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stages: vec![
                Stage::Transform,
                Stage::NormalizeReference,
                Stage::MultiSubquestion,
                Stage::LongReference,
                Stage::Easy,
                Stage::InconsistentReference,
            ],
            max_reference_len: 64,
            min_question_marks: 2,
            enumerator_patterns: vec![
                r"\(a\).*\(b\)".into(),
                r"\(i\).*\(ii\)".into(),
                r"(?:^|\s)1[).].*\s2[).]".into(),
            ],
            easy_k: 8,
            easy_solver: None,
            ensemble: Vec::new(),
        }
    }
}

impl PipelineConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let mut seen = HashSet::new();
        for s in &self.stages {
            if !seen.insert(*s) {
                p.push(format!("clean.stages lists '{}' twice", s.name()));
            }
        }
        if self.max_reference_len == 0 {
            p.push("clean.max_reference_len must be positive".into());
        }
        if self.min_question_marks < 2 {
            p.push("clean.min_question_marks must be at least 2".into());
        }
        for pat in &self.enumerator_patterns {
            if let Err(e) = Regex::new(pat) {
                p.push(format!("clean.enumerator_patterns: '{pat}': {e}"));
            }
        }
        if self.stages.contains(&Stage::Easy) {
            if self.easy_k == 0 {
                p.push("clean.easy_k must be positive".into());
            }
            if self.easy_solver.is_none() {
                p.push("clean.easy_solver is required when the easy stage is enabled".into());
            }
        }
        if self.stages.contains(&Stage::InconsistentReference) && self.ensemble.len() < 2 {
            p.push("clean.ensemble needs at least two solvers".into());
        }
        for s in self.easy_solver.iter().chain(&self.ensemble) {
            if let SolverSpec::NoisyOracle { noise, name, .. } = s {
                if !(0.0..=1.0).contains(noise) {
                    p.push(format!("clean solver '{name}': noise must lie in [0, 1]"));
                }
            }
        }
        p
    }
}

/// Strip `\boxed{…}` and `$…$` wrappers and collapse whitespace.
pub fn normalize_reference(s: &str) -> String {
    let mut cur = s.trim().to_string();
    loop {
        let before = cur.clone();
        if let Some(inner) = cur.strip_prefix("\\boxed{").and_then(|r| r.strip_suffix('}')) {
            cur = inner.trim().to_string();
        }
        if cur.len() >= 2 && cur.starts_with('$') && cur.ends_with('$') {
            cur = cur.trim_matches('$').trim().to_string();
        }
        if cur == before {
            break;
        }
    }
    cur.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Format-conversion seam; the default leaves records unchanged.
pub trait Transform: Send + Sync {
    fn apply(&self, record: DatasetRecord) -> DatasetRecord;
}

pub struct IdentityTransform;

impl Transform for IdentityTransform {
    fn apply(&self, record: DatasetRecord) -> DatasetRecord {
        record
    }
}

/// Keep/drop decision of one filter, with an optional solver-failure flag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub drop: Option<Reason>,
    pub flag: Option<String>,
}

impl Verdict {
    fn keep() -> Self {
        Self { drop: None, flag: None }
    }

    fn drop(reason: Reason) -> Self {
        Self {
            drop: Some(reason),
            flag: None,
        }
    }

    fn flagged(msg: String) -> Self {
        Self {
            drop: None,
            flag: Some(msg),
        }
    }
}

pub struct MultiQuestionFilter {
    min_marks: usize,
    patterns: Vec<Regex>,
}

impl MultiQuestionFilter {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let patterns = cfg
            .enumerator_patterns
            .iter()
            .map(|p| Regex::new(&format!("(?is){p}")).map_err(|e| Error::Config(format!("pattern '{p}': {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            min_marks: cfg.min_question_marks,
            patterns,
        })
    }

    pub fn check(&self, record: &DatasetRecord) -> Verdict {
        let q = &record.question;
        if q.matches('?').count() >= self.min_marks || self.patterns.iter().any(|p| p.is_match(q)) {
            Verdict::drop(Reason::MultipleSubquestions)
        } else {
            Verdict::keep()
        }
    }
}

/// Drop iff the normalised reference is longer than `max_len` characters.
pub fn filter_long_reference(record: &DatasetRecord, max_len: usize) -> Verdict {
    if normalize_reference(&record.reference_answer).chars().count() > max_len {
        Verdict::drop(Reason::LongReference)
    } else {
        Verdict::keep()
    }
}

fn equivalent(a: &str, b: &str, checker: &dyn EquivalenceChecker) -> bool {
    match AnswerPair::new(a, b) {
        Ok(pair) => reward::is_equivalent(&pair, checker),
        Err(_) => a.trim().is_empty() && b.trim().is_empty(),
    }
}

/// Drop iff all `k` sampled answers are judged correct.
pub fn filter_easy(record: &DatasetRecord, solver: &dyn Solver, k: usize, checker: &dyn EquivalenceChecker) -> Verdict {
    match solver.solve(record, k) {
        Err(e) => Verdict::flagged(format!("solver '{}' failed: {e}", solver.name())),
        Ok(answers) => {
            if answers.len() == k && answers.iter().all(|a| equivalent(a, &record.reference_answer, checker)) {
                Verdict::drop(Reason::TooEasy)
            } else {
                Verdict::keep()
            }
        }
    }
}

/// Drop iff the ensemble agrees on an answer that differs from the reference.
pub fn filter_inconsistent_reference(
    record: &DatasetRecord,
    ensemble: &[Box<dyn Solver>],
    checker: &dyn EquivalenceChecker,
) -> Verdict {
    let mut answers = Vec::with_capacity(ensemble.len());
    for s in ensemble {
        match s.solve(record, 1) {
            Ok(mut a) if a.len() == 1 => answers.push(a.remove(0)),
            Ok(_) => return Verdict::flagged(format!("solver '{}' returned no answer", s.name())),
            Err(e) => return Verdict::flagged(format!("solver '{}' failed: {e}", s.name())),
        }
    }
    let Some(first) = answers.first() else {
        return Verdict::keep();
    };
    let consensus = answers.iter().all(|a| equivalent(first, a, checker));
    if consensus && !equivalent(first, &record.reference_answer, checker) {
        Verdict::drop(Reason::InconsistentReference)
    } else {
        Verdict::keep()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub input: usize,
    pub removed: usize,
    pub retained: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub id: String,
    pub line: usize,
    pub stage: String,
    pub reason: Reason,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flag {
    pub id: String,
    pub line: usize,
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Malformed {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub input_lines: usize,
    pub parsed: usize,
    pub malformed: Vec<Malformed>,
    pub stages: Vec<StageReport>,
    pub removals: Vec<Removal>,
    pub flags: Vec<Flag>,
    pub retained: usize,
    pub reason_counts: BTreeMap<Reason, usize>,
}

impl PipelineReport {
    /// Every parsed record is either retained or removed exactly once, and
    /// each stage conserves its input.
    pub fn check_conservation(&self) -> Result<()> {
        if self.parsed + self.malformed.len() != self.input_lines {
            return Err(Error::Invariant("parsed + malformed != input lines".into()));
        }
        let mut expected_input = self.parsed;
        for s in &self.stages {
            if s.input != expected_input || s.input != s.removed + s.retained {
                return Err(Error::Invariant(format!("stage '{}' does not conserve counts", s.stage)));
            }
            expected_input = s.retained;
        }
        if expected_input != self.retained || self.retained + self.removals.len() != self.parsed {
            return Err(Error::Invariant("end-to-end counts do not balance".into()));
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input lines: {}", self.input_lines);
        let _ = writeln!(s, "malformed:   {}", self.malformed.len());
        for m in &self.malformed {
            let _ = writeln!(s, "  line {}: {}", m.line, m.message);
        }
        let _ = writeln!(s, "{:<24} {:>7} {:>7} {:>8}", "stage", "input", "removed", "retained");
        for st in &self.stages {
            let _ = writeln!(s, "{:<24} {:>7} {:>7} {:>8}", st.stage, st.input, st.removed, st.retained);
        }
        let _ = writeln!(s, "retained: {}", self.retained);
        for (r, n) in &self.reason_counts {
            let _ = writeln!(s, "  removed as {r}: {n}");
        }
        if !self.flags.is_empty() {
            let _ = writeln!(s, "flagged (kept): {}", self.flags.len());
            for f in &self.flags {
                let _ = writeln!(s, "  {} [{}]: {}", f.id, f.stage, f.message);
            }
        }
        s
    }
}

/// A record in flight, remembering its source line and whether a stage
/// rewrote it.
struct Item {
    line: usize,
    raw: String,
    record: DatasetRecord,
    touched: bool,
}

/// Result of a pipeline run: output JSONL and the report.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub jsonl: String,
    pub records: Vec<DatasetRecord>,
    pub report: PipelineReport,
}

pub struct Pipeline<'a> {
    cfg: &'a PipelineConfig,
    checker: &'a dyn EquivalenceChecker,
    transform: Box<dyn Transform>,
    multi: MultiQuestionFilter,
    easy: Option<Box<dyn Solver>>,
    ensemble: Vec<Box<dyn Solver>>,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a PipelineConfig, checker: &'a dyn EquivalenceChecker) -> Result<Self> {
        let problems = cfg.problems();
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(Self {
            cfg,
            checker,
            transform: Box::new(IdentityTransform),
            multi: MultiQuestionFilter::new(cfg)?,
            easy: cfg.easy_solver.as_ref().map(build_solver),
            ensemble: cfg.ensemble.iter().map(build_solver).collect(),
        })
    }

    pub fn with_transform(mut self, t: Box<dyn Transform>) -> Self {
        self.transform = t;
        self
    }

    fn verdict(&self, stage: Stage, rec: &DatasetRecord) -> Verdict {
        match stage {
            Stage::Transform | Stage::NormalizeReference => Verdict::keep(),
            Stage::MultiSubquestion => self.multi.check(rec),
            Stage::LongReference => filter_long_reference(rec, self.cfg.max_reference_len),
            Stage::Easy => match &self.easy {
                Some(s) => filter_easy(rec, s.as_ref(), self.cfg.easy_k, self.checker),
                None => Verdict::keep(),
            },
            Stage::InconsistentReference => filter_inconsistent_reference(rec, &self.ensemble, self.checker),
        }
    }

    pub fn run(&self, input: &str, exec: Exec) -> Result<PipelineOutput> {
        let mut report = PipelineReport::default();
        let mut items = Vec::new();
        let mut ids = HashSet::new();
        for (i, raw) in input.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            report.input_lines += 1;
            let parsed: std::result::Result<DatasetRecord, String> =
                serde_json::from_str(raw).map_err(|e| format!("invalid record: {e}"));
            match parsed.and_then(|r| match r.problems() {
                Some(p) => Err(p),
                None if !ids.insert(r.id.clone()) => Err(format!("duplicate id '{}'", r.id)),
                None => Ok(r),
            }) {
                Ok(record) => items.push(Item {
                    line,
                    raw: raw.to_string(),
                    record,
                    touched: false,
                }),
                Err(message) => report.malformed.push(Malformed { line, message }),
            }
        }
        report.parsed = items.len();

        for &stage in &self.cfg.stages {
            let input = items.len();
            items = match stage {
                Stage::Transform => exec.map_owned(items, |mut it| {
                    let before = it.record.clone();
                    it.record = self.transform.apply(it.record);
                    it.touched |= it.record != before;
                    it
                }),
                Stage::NormalizeReference => exec.map_owned(items, |mut it| {
                    let n = normalize_reference(&it.record.reference_answer);
                    if n != it.record.reference_answer {
                        it.record.reference_answer = n;
                        it.touched = true;
                    }
                    it
                }),
                _ => {
                    let verdicts = exec.map(&items, |it| self.verdict(stage, &it.record));
                    let mut kept = Vec::with_capacity(items.len());
                    for (it, v) in items.into_iter().zip(verdicts) {
                        if let Some(message) = v.flag {
                            report.flags.push(Flag {
                                id: it.record.id.clone(),
                                line: it.line,
                                stage: stage.name().into(),
                                message,
                            });
                        }
                        match v.drop {
                            Some(reason) => {
                                *report.reason_counts.entry(reason).or_default() += 1;
                                report.removals.push(Removal {
                                    id: it.record.id.clone(),
                                    line: it.line,
                                    stage: stage.name().into(),
                                    reason,
                                });
                            }
                            None => kept.push(it),
                        }
                    }
                    kept
                }
            };
            report.stages.push(StageReport {
                stage: stage.name().into(),
                input,
                removed: input - items.len(),
                retained: items.len(),
            });
        }
        report.retained = items.len();
        report.check_conservation()?;

        let mut jsonl = String::new();
        let mut records = Vec::with_capacity(items.len());
        for it in items {
            if it.touched {
                jsonl.push_str(&serde_json::to_string(&it.record)?);
            } else {
                jsonl.push_str(&it.raw);
            }
            jsonl.push('\n');
            records.push(it.record);
        }
        Ok(PipelineOutput { jsonl, records, report })
    }
}
