//! Synthetic verifiable tasks: modular-arithmetic chains.
//!
//! A question such as `3+4-2 mod 5` is shown to the policy as the token
//! sequence `3 + 4 - 2 =` and the reference answer is the final residue.
//! Responses follow the grammar `filler* marker digit EOS`; filler runs
//! give responses a long-tailed length distribution.

use serde::{Deserialize, Serialize};

use crate::data::DatasetRecord;
use crate::error::{Error, Result};
use crate::policy::{PolicyParams, Token, Vocab};
use crate::rng;
use crate::rollout::Prompt;

pub const MODULAR_FAMILY: &str = "modular_chain";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub family: String,
    pub modulus: u32,
    /// Operands are drawn from `0..=operand_max`.
    pub operand_max: u32,
    pub min_ops: usize,
    pub max_ops: usize,
    pub filler_count: usize,
    pub train_size: usize,
    pub eval_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            family: MODULAR_FAMILY.into(),
            modulus: 3,
            operand_max: 9,
            min_ops: 1,
            max_ops: 2,
            filler_count: 9,
            train_size: 512,
            eval_size: 128,
        }
    }
}

impl TaskConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.family != MODULAR_FAMILY {
            p.push(format!("tasks.family: unknown family '{}'", self.family));
        }
        if !(2..=10).contains(&self.modulus) {
            p.push("tasks.modulus must lie in 2..=10 so answers are single digits".into());
        }
        if self.operand_max > 9 {
            p.push("tasks.operand_max must be at most 9".into());
        }
        if self.min_ops > self.max_ops {
            p.push("tasks.min_ops must not exceed tasks.max_ops".into());
        }
        if self.filler_count == 0 {
            p.push("tasks.filler_count must be positive".into());
        }
        if self.train_size == 0 {
            p.push("tasks.train_size must be positive".into());
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

/// Fixed token layout of the modular-chain family.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVocab {
    pub vocab: Vocab,
    pub filler_count: usize,
}

pub const PLUS: Token = 10;
pub const MINUS: Token = 11;
pub const EQUALS: Token = 12;
pub const MARKER: Token = 13;
pub const EOS: Token = 14;
pub const FIRST_FILLER: Token = 15;

impl TaskVocab {
    pub fn new(filler_count: usize) -> Result<Self> {
        let mut symbols: Vec<String> = (0..10).map(|d| d.to_string()).collect();
        symbols.extend(["+", "-", "=", "#", "<eos>"].map(String::from));
        symbols.extend((0..filler_count).map(|i| format!("~{i}")));
        Ok(Self {
            vocab: Vocab::with_symbols(symbols, EOS, MARKER)?,
            filler_count,
        })
    }

    pub fn filler(&self, i: usize) -> Token {
        FIRST_FILLER + i as Token
    }

    pub fn digit(d: u32) -> Token {
        d
    }

    /// Prompt tokens for a chain like `3+4-2`, followed by `=`.
    pub fn tokenize_chain(&self, chain: &str) -> Result<Vec<Token>> {
        let mut out = Vec::with_capacity(chain.len() + 1);
        for c in chain.chars().filter(|c| !c.is_whitespace()) {
            out.push(match c {
                '0'..='9' => c as Token - '0' as Token,
                '+' => PLUS,
                '-' => MINUS,
                _ => return Err(Error::Input(format!("unexpected character '{c}' in chain '{chain}'"))),
            });
        }
        out.push(EQUALS);
        Ok(out)
    }
}

/// Split `"3+4-2 mod 5"` into the chain and the modulus.
pub fn split_question(question: &str) -> Result<(&str, u32)> {
    let (chain, m) = question
        .rsplit_once(" mod ")
        .ok_or_else(|| Error::Input(format!("question '{question}' lacks a modulus")))?;
    let m: u32 = m.trim().parse().map_err(|_| Error::Input(format!("bad modulus in '{question}'")))?;
    if m == 0 {
        return Err(Error::Input("modulus must be positive".into()));
    }
    Ok((chain.trim(), m))
}

/// Evaluate a question by a left-to-right scan, independent of generation.
pub fn evaluate_question(question: &str) -> Result<u32> {
    let (chain, m) = split_question(question)?;
    let mut total: i64 = 0;
    let mut sign: i64 = 1;
    let mut current: Option<i64> = None;
    for c in chain.chars().filter(|c| !c.is_whitespace()) {
        match c {
            '0'..='9' => current = Some(current.unwrap_or(0) * 10 + (c as i64 - '0' as i64)),
            '+' | '-' => {
                let v = current.take().ok_or_else(|| Error::Input(format!("dangling operator in '{chain}'")))?;
                total += sign * v;
                sign = if c == '+' { 1 } else { -1 };
            }
            _ => return Err(Error::Input(format!("unexpected character '{c}' in '{chain}'"))),
        }
    }
    let v = current.ok_or_else(|| Error::Input(format!("chain '{chain}' ends with an operator")))?;
    total += sign * v;
    Ok(total.rem_euclid(m as i64) as u32)
}

/// `count` records of the named family, deterministic in `seed`.
pub fn generate_tasks(cfg: &TaskConfig, count: usize, seed: u64, stream: u64) -> Result<Vec<DatasetRecord>> {
    use rand::Rng as _;
    if cfg.family != MODULAR_FAMILY {
        return Err(Error::Config(format!("unknown task family '{}'", cfg.family)));
    }
    cfg.validate()?;
    let mut r = rng::stream(seed, rng::mix(&[0x7a5c, stream]));
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let ops = r.random_range(cfg.min_ops..=cfg.max_ops);
        let mut chain = r.random_range(0..=cfg.operand_max).to_string();
        let mut value = chain.parse::<i64>().expect("digit");
        for _ in 0..ops {
            let x = r.random_range(0..=cfg.operand_max) as i64;
            if r.random_bool(0.5) {
                chain.push('+');
                value += x;
            } else {
                chain.push('-');
                value -= x;
            }
            chain.push_str(&x.to_string());
        }
        let question = format!("{chain} mod {}", cfg.modulus);
        let reference = value.rem_euclid(cfg.modulus as i64).to_string();
        let mut meta = serde_json::Map::new();
        meta.insert("family".into(), MODULAR_FAMILY.into());
        meta.insert("modulus".into(), cfg.modulus.into());
        out.push(DatasetRecord {
            id: format!("mc-{stream}-{i:05}"),
            question,
            reference_answer: reference,
            meta,
        });
    }
    Ok(out)
}

/// Convert dataset records into policy prompts.
pub fn to_prompts(records: &[DatasetRecord], tv: &TaskVocab) -> Result<Vec<Prompt>> {
    records
        .iter()
        .map(|rec| {
            let (chain, _) = split_question(&rec.question)?;
            Ok(Prompt {
                id: rec.id.clone(),
                tokens: tv.tokenize_chain(chain)?,
                reference: rec.reference_answer.clone(),
            })
        })
        .collect()
}

/// How the policy weights are initialised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Zero,
    #[default]
    Prior,
}

/// A format-aware starting point standing in for a pretrained model: it
/// knows the response grammar but not the arithmetic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Logit given to the grammatical next token.
    pub confidence: f64,
    /// Probability of leaving a completed filler run for the answer.
    pub exit_prob: f64,
    /// Logit offset of out-of-range digits after the marker.
    pub answer_spread: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            confidence: 10.0,
            exit_prob: 0.3,
            answer_spread: 0.0,
        }
    }
}

impl PriorConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.confidence.is_finite() && self.confidence >= 0.0) {
            p.push("policy.prior.confidence must be finite and non-negative".into());
        }
        if !(self.exit_prob > 0.0 && self.exit_prob < 1.0) {
            p.push("policy.prior.exit_prob must lie in (0, 1)".into());
        }
        if !self.answer_spread.is_finite() {
            p.push("policy.prior.answer_spread must be finite".into());
        }
        p
    }
}

/// Weights encoding the response grammar as a first-order chain on the
/// most recent token: `= → ~0 → ~1 → … → ~last → {~0 | #}`, `# → digit`,
/// `digit → EOS`.
pub fn prior_params(tv: &TaskVocab, context_width: usize, prior: &PriorConfig) -> Result<PolicyParams> {
    let v = tv.vocab.size();
    let mut p = PolicyParams::zeros(v, context_width)?;
    let last = context_width - 1;
    let l = prior.confidence;
    let f = |i: usize| tv.filler(i);
    let set = |p: &mut PolicyParams, prev: Token, next: Token, logit: f64| {
        let col = p.slot_feature(last, prev);
        p.set_weight(next, col, logit);
    };
    set(&mut p, EQUALS, f(0), l);
    for i in 0..tv.filler_count - 1 {
        set(&mut p, f(i), f(i + 1), l);
    }
    let tail = f(tv.filler_count - 1);
    set(&mut p, tail, f(0), l + (1.0 - prior.exit_prob).ln());
    set(&mut p, tail, MARKER, l + prior.exit_prob.ln());
    for d in 0..10 {
        set(&mut p, MARKER, d, l - 10f64.ln() + prior.answer_spread);
        set(&mut p, d, EOS, l);
    }
    Ok(p)
}
