//! Binary verifiable rewards.
//!
//! A response earns 1 when the text after its last answer marker is judged
//! equivalent to the reference, 0 otherwise. Responses cut off at the global
//! length cap always earn 0. Equivalence goes through the
//! [`EquivalenceChecker`] seam; [`RuleChecker`] is the rule-based reference
//! implementation.

use std::collections::BTreeMap;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Token, Vocab};
use crate::rollout::{Status, Trajectory};

pub type Rational = Ratio<i128>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerPair {
    pub predicted: String,
    pub reference: String,
}

impl AnswerPair {
    pub fn new(predicted: impl Into<String>, reference: impl Into<String>) -> Result<Self> {
        let reference = reference.into();
        if reference.trim().is_empty() {
            return Err(Error::Input("reference answer is empty".into()));
        }
        Ok(Self {
            predicted: predicted.into(),
            reference,
        })
    }
}

/// Judges whether a predicted answer matches a reference.
pub trait EquivalenceChecker: Send + Sync {
    /// Identifier recorded in run metadata.
    fn id(&self) -> &str;
    fn is_equivalent(&self, pair: &AnswerPair) -> bool;
}

pub fn is_equivalent(pair: &AnswerPair, checker: &dyn EquivalenceChecker) -> bool {
    checker.is_equivalent(pair)
}

/// One entry of the unit table: `value · factor` is in the base unit of `dimension`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitEntry {
    pub dimension: String,
    /// Exact factor as text, e.g. `"1/100"` or `"0.001"`.
    pub factor: String,
}

/// Unit and word-number tables for [`RuleChecker`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckerTables {
    pub units: BTreeMap<String, UnitEntry>,
    /// Cardinal words multiply a following fraction word: "three quarters".
    pub cardinals: BTreeMap<String, String>,
    pub fractions: BTreeMap<String, String>,
}

impl Default for CheckerTables {
    fn default() -> Self {
        let unit = |d: &str, f: &str| UnitEntry {
            dimension: d.into(),
            factor: f.into(),
        };
        let units = [
            ("m", unit("length", "1")),
            ("cm", unit("length", "1/100")),
            ("mm", unit("length", "1/1000")),
            ("kg", unit("mass", "1")),
            ("g", unit("mass", "1/1000")),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let words = [
            "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
            "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
        ];
        let cardinals = words.iter().enumerate().map(|(i, w)| (w.to_string(), i.to_string())).collect();
        let fractions = [("half", "1/2"), ("halves", "1/2"), ("quarter", "1/4"), ("quarters", "1/4")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self {
            units,
            cardinals,
            fractions,
        }
    }
}

/// Rule-based checker: normalized exact match, then exact rational
/// comparison of numbers, unit quantities and small number words.
#[derive(Clone, Debug)]
pub struct RuleChecker {
    units: Vec<(String, String, Rational)>,
    cardinals: BTreeMap<String, Rational>,
    fractions: BTreeMap<String, Rational>,
}

pub const RULE_CHECKER_ID: &str = "rule-v1";

#[derive(Clone, Debug, PartialEq, Eq)]
struct Quantity {
    value: Rational,
    dimension: Option<String>,
}

impl RuleChecker {
    pub fn new(tables: &CheckerTables) -> Result<Self> {
        let parse = |what: &str, s: &str| {
            parse_number(s).ok_or_else(|| Error::Config(format!("{what}: cannot parse '{s}' as an exact number")))
        };
        let mut units = Vec::new();
        for (sym, e) in &tables.units {
            units.push((sym.to_lowercase(), e.dimension.clone(), parse(&format!("unit {sym}"), &e.factor)?));
        }
        // longest symbol first so "mm" is tried before "m"
        units.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        let words = |m: &BTreeMap<String, String>| -> Result<BTreeMap<String, Rational>> {
            m.iter()
                .map(|(k, v)| Ok((k.to_lowercase(), parse(&format!("word {k}"), v)?)))
                .collect()
        };
        Ok(Self {
            units,
            cardinals: words(&tables.cardinals)?,
            fractions: words(&tables.fractions)?,
        })
    }

    fn quantity(&self, s: &str) -> Option<Quantity> {
        if let Some(v) = parse_number(s) {
            return Some(Quantity {
                value: v,
                dimension: None,
            });
        }
        for (sym, dim, factor) in &self.units {
            if let Some(num) = s.strip_suffix(sym.as_str()) {
                if let Some(v) = parse_number(num.trim_end()) {
                    return Some(Quantity {
                        value: v * factor,
                        dimension: Some(dim.clone()),
                    });
                }
            }
        }
        self.words(s).map(|value| Quantity {
            value,
            dimension: None,
        })
    }

    fn words(&self, s: &str) -> Option<Rational> {
        let parts: Vec<&str> = s.split(|c: char| c.is_whitespace() || c == '-').filter(|p| !p.is_empty()).collect();
        match parts.as_slice() {
            [w] => self.cardinals.get(*w).or_else(|| self.fractions.get(*w)).copied(),
            [a, b] => {
                let count = match *a {
                    "a" | "an" => Rational::from_integer(1),
                    _ => self.cardinals.get(*a).copied().or_else(|| parse_number(a))?,
                };
                Some(count * *self.fractions.get(*b)?)
            }
            _ => None,
        }
    }
}

impl Default for RuleChecker {
    fn default() -> Self {
        Self::new(&CheckerTables::default()).expect("default tables parse")
    }
}

impl EquivalenceChecker for RuleChecker {
    fn id(&self) -> &str {
        RULE_CHECKER_ID
    }

    fn is_equivalent(&self, pair: &AnswerPair) -> bool {
        let a = normalize(&pair.predicted);
        let b = normalize(&pair.reference);
        if a.is_empty() || b.is_empty() {
            return false;
        }
        if a == b {
            return true;
        }
        match (self.quantity(&a), self.quantity(&b)) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        }
    }
}

/// Trim, lowercase, and collapse internal whitespace.
pub fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Exact parse of an integer, a decimal, or a fraction `a/b`.
pub fn parse_number(s: &str) -> Option<Rational> {
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let n = parse_decimal(n.trim())?;
        let d = parse_decimal(d.trim())?;
        if *d.numer() == 0 {
            return None;
        }
        return Some(n / d);
    }
    parse_decimal(s)
}

fn parse_decimal(s: &str) -> Option<Rational> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body, ""),
    };
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    if int.len() + frac.len() > 30 {
        return None;
    }
    let digits: i128 = format!("{int}{frac}").parse().ok()?;
    let scale = 10i128.checked_pow(frac.len() as u32)?;
    let v = Rational::new(digits, scale);
    Some(if neg { -v } else { v })
}

/// Detokenized span after the last answer marker, up to EOS or the end.
pub fn extract_final_answer(response: &[Token], vocab: &Vocab) -> Option<String> {
    let marker = response.iter().rposition(|&t| t == vocab.marker())?;
    let tail = &response[marker + 1..];
    let end = tail.iter().position(|&t| t == vocab.eos()).unwrap_or(tail.len());
    Some(vocab.detokenize(&tail[..end]))
}

/// `{0, 1}` reward for a completed trajectory.
pub fn compute_reward(traj: &Trajectory, reference: &str, checker: &dyn EquivalenceChecker, vocab: &Vocab) -> u8 {
    if traj.status == Status::TruncatedGlobal {
        return 0;
    }
    let Some(answer) = extract_final_answer(&traj.response(), vocab) else {
        return 0;
    };
    match AnswerPair::new(answer, reference) {
        Ok(pair) if checker.is_equivalent(&pair) => 1,
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::{Prompt, Segment};
    use std::sync::Arc;

    fn eq(a: &str, b: &str) -> bool {
        RuleChecker::default().is_equivalent(&AnswerPair::new(a, b).unwrap())
    }

    #[test]
    fn documented_equivalent_pairs() {
        assert!(eq("27cm", "0.27m"));
        assert!(eq("1/2", "one half"));
        assert!(eq("1/2", "0.5"));
    }

    #[test]
    fn checker_pipeline_cases() {
        assert!(eq("  Forty Two ", "forty   two"));
        assert!(eq("42", "42.0"));
        assert!(eq("-3/6", "-0.5"));
        assert!(eq("270 mm", "27cm"));
        assert!(eq("1500g", "1.5 kg"));
        assert!(eq("three quarters", "0.75"));
        assert!(eq("twenty", "20"));
        assert!(eq("a half", "2/4"));
        assert!(!eq("27cm", "0.27kg"));
        assert!(!eq("27cm", "27"));
        assert!(!eq("1/3", "0.33"));
        assert!(!eq("", "0"));
        assert!(!eq("abc", "abd"));
        assert!(!eq("1/0", "2/0"));
        // symmetric on the recognized forms
        for (a, b) in [("27cm", "0.27m"), ("1/2", "one half"), ("7", "seven")] {
            assert_eq!(eq(a, b), eq(b, a));
        }
    }

    #[test]
    fn parse_number_exact() {
        assert_eq!(parse_number("0.27"), Some(Rational::new(27, 100)));
        assert_eq!(parse_number("3 / 4"), Some(Rational::new(3, 4)));
        assert_eq!(parse_number(".5"), Some(Rational::new(1, 2)));
        assert_eq!(parse_number("1e3"), None);
        assert_eq!(parse_number("-"), None);
    }

    fn vocab() -> Vocab {
        let mut syms: Vec<String> = (0..10).map(|d| d.to_string()).collect();
        syms.push("#".into()); // 10 marker
        syms.push("$".into()); // 11 eos
        syms.push("~".into()); // 12 filler
        Vocab::with_symbols(syms, 11, 10).unwrap()
    }

    #[test]
    fn extraction_rules() {
        let v = vocab();
        assert_eq!(extract_final_answer(&[12, 10, 4, 2, 11], &v).as_deref(), Some("42"));
        assert_eq!(extract_final_answer(&[12, 4, 2, 11], &v), None);
        assert_eq!(extract_final_answer(&[10, 1, 10, 7, 11], &v).as_deref(), Some("7"));
        assert_eq!(extract_final_answer(&[10, 3, 3], &v).as_deref(), Some("33"));
    }

    #[test]
    fn extraction_exhaustive_last_marker() {
        // every sequence of length ≤ 5 over {digit 1, marker, filler}
        let v = vocab();
        let alphabet = [1u32, 10, 12];
        for len in 0..=5u32 {
            for code in 0..3usize.pow(len) {
                let mut c = code;
                let seq: Vec<Token> = (0..len)
                    .map(|_| {
                        let t = alphabet[c % 3];
                        c /= 3;
                        t
                    })
                    .collect();
                let expect = seq.iter().rposition(|&t| t == 10).map(|p| v.detokenize(&seq[p + 1..]));
                assert_eq!(extract_final_answer(&seq, &v), expect);
            }
        }
    }

    fn traj(tokens: Vec<Token>, status: Status) -> Trajectory {
        let mut t = Trajectory::new(
            0,
            0,
            0,
            Arc::new(Prompt {
                id: "p".into(),
                tokens: vec![],
                reference: "42".into(),
            }),
        );
        t.segments.push(Segment {
            gen_logprobs: vec![-0.1; tokens.len()],
            tokens,
            gen_version: 0,
        });
        t.status = status;
        t
    }

    #[test]
    fn reward_rules() {
        let v = vocab();
        let c = RuleChecker::default();
        assert_eq!(compute_reward(&traj(vec![10, 4, 2, 11], Status::FinishedEos), "42", &c, &v), 1);
        assert_eq!(compute_reward(&traj(vec![10, 4, 2, 11], Status::FinishedEos), "forty", &c, &v), 0);
        assert_eq!(compute_reward(&traj(vec![4, 2, 11], Status::FinishedEos), "42", &c, &v), 0);
        // truncated with a correct partial answer
        assert_eq!(compute_reward(&traj(vec![12, 10, 4, 2], Status::TruncatedGlobal), "42", &c, &v), 0);
    }

    #[test]
    fn custom_tables_load() {
        let mut t = CheckerTables::default();
        t.units.insert(
            "km".into(),
            UnitEntry {
                dimension: "length".into(),
                factor: "1000".into(),
            },
        );
        let c = RuleChecker::new(&t).unwrap();
        assert!(c.is_equivalent(&AnswerPair::new("2km", "2000m").unwrap()));
        t.units.insert(
            "bad".into(),
            UnitEntry {
                dimension: "x".into(),
                factor: "pi".into(),
            },
        );
        assert!(matches!(RuleChecker::new(&t), Err(Error::Config(_))));
    }

    #[test]
    fn empty_reference_rejected() {
        assert!(AnswerPair::new("1", "  ").is_err());
    }
}
