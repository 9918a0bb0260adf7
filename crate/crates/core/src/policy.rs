//! Linear-softmax autoregressive policy over a small vocabulary.
//!
//! The context feature vector is the concatenation of one-hot encodings of
//! the trailing `context_width` tokens plus a constant bias feature. Slots
//! before the start of the sequence are padding and encode as all-zero, so a
//! short context needs no reserved token. Logits are `W · features`, which
//! gives closed-form gradients of every per-token log-probability:
//! `∇_W ln π(y | ctx) = (onehot(y) − π(·|ctx)) ⊗ features(ctx)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type Token = u32;

/// Vocabulary description: size, the two structural tokens, and display text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    eos_id: Token,
    answer_marker_id: Token,
    symbols: Vec<String>,
}

impl Vocab {
    pub fn new(size: usize, eos_id: Token, answer_marker_id: Token) -> Result<Self> {
        let symbols = (0..size).map(|i| format!("<{i}>")).collect();
        Self::with_symbols(symbols, eos_id, answer_marker_id)
    }

    pub fn with_symbols(symbols: Vec<String>, eos_id: Token, answer_marker_id: Token) -> Result<Self> {
        let size = symbols.len();
        if size < 4 {
            return Err(Error::Config(format!("vocabulary size {size} < 4")));
        }
        if eos_id == answer_marker_id {
            return Err(Error::Config("eos and answer marker must differ".into()));
        }
        if eos_id as usize >= size || answer_marker_id as usize >= size {
            return Err(Error::Config("structural token id out of range".into()));
        }
        Ok(Self {
            size,
            eos_id,
            answer_marker_id,
            symbols,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> Token {
        self.eos_id
    }

    pub fn marker(&self) -> Token {
        self.answer_marker_id
    }

    pub fn symbol(&self, token: Token) -> &str {
        &self.symbols[token as usize]
    }

    /// Concatenate the display text of `tokens`.
    pub fn detokenize(&self, tokens: &[Token]) -> String {
        tokens.iter().map(|&t| self.symbol(t)).collect()
    }
}

/// Weights of the linear-softmax policy plus a version stamp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    vocab_size: usize,
    context_width: usize,
    /// Row-major `vocab_size × feature_dim`.
    weights: Vec<f64>,
    version: u64,
}

impl PolicyParams {
    /// All-zero weights (the uniform policy) at version 0.
    pub fn zeros(vocab_size: usize, context_width: usize) -> Result<Self> {
        if vocab_size < 4 {
            return Err(Error::Config(format!("vocabulary size {vocab_size} < 4")));
        }
        if context_width == 0 {
            return Err(Error::Config("context_width must be positive".into()));
        }
        let dim = context_width * vocab_size + 1;
        Ok(Self {
            vocab_size,
            context_width,
            weights: vec![0.0; vocab_size * dim],
            version: 0,
        })
    }

    pub fn from_weights(vocab_size: usize, context_width: usize, weights: Vec<f64>, version: u64) -> Result<Self> {
        let mut p = Self::zeros(vocab_size, context_width)?;
        if weights.len() != p.weights.len() {
            return Err(Error::Input(format!(
                "expected {} weights, got {}",
                p.weights.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric("non-finite weight".into()));
        }
        p.weights = weights;
        p.version = version;
        Ok(p)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_width(&self) -> usize {
        self.context_width
    }

    pub fn feature_dim(&self) -> usize {
        self.context_width * self.vocab_size + 1
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mutable weight access. Does not bump the version; callers that
    /// produce a new policy should go through the optimizer.
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Index of the bias column.
    pub fn bias_feature(&self) -> usize {
        self.context_width * self.vocab_size
    }

    /// Feature column for `token` in trailing slot `slot` where slot
    /// `context_width - 1` is the most recent token.
    pub fn slot_feature(&self, slot: usize, token: Token) -> usize {
        slot * self.vocab_size + token as usize
    }

    pub fn weight(&self, row: Token, feature: usize) -> f64 {
        self.weights[row as usize * self.feature_dim() + feature]
    }

    pub fn set_weight(&mut self, row: Token, feature: usize, value: f64) {
        let dim = self.feature_dim();
        self.weights[row as usize * dim + feature] = value;
    }

    /// Active feature columns for `context`, written into `out`.
    pub fn active_features(&self, context: &[Token], out: &mut Vec<usize>) -> Result<()> {
        out.clear();
        let w = self.context_width;
        let n = context.len();
        for slot in 0..w {
            // slot w-1 holds context[n-1]
            let back = w - slot;
            if back <= n {
                let tok = context[n - back];
                if tok as usize >= self.vocab_size {
                    return Err(Error::Input(format!(
                        "token id {tok} out of range for vocabulary of {}",
                        self.vocab_size
                    )));
                }
                out.push(self.slot_feature(slot, tok));
            }
        }
        out.push(self.bias_feature());
        Ok(())
    }

    fn logits_from_features(&self, features: &[usize]) -> Vec<f64> {
        let dim = self.feature_dim();
        (0..self.vocab_size)
            .map(|y| {
                let row = &self.weights[y * dim..(y + 1) * dim];
                features.iter().map(|&f| row[f]).sum()
            })
            .collect()
    }
}

/// Next-token distribution: logits and their softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    log_norm: f64,
}

impl TokenDistribution {
    /// Softmax of `logits`. Entries may be `-inf` as long as one is finite.
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() || logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::Numeric("logits must be finite or -inf with a finite maximum".into()));
        }
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs = exps.iter().map(|e| e / z).collect();
        Ok(Self {
            logits,
            probs,
            log_norm: max + z.ln(),
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// `ln π(token)`, computed as `logit − logsumexp` for precision.
    pub fn log_prob(&self, token: Token) -> f64 {
        self.logits[token as usize] - self.log_norm
    }
}

/// Temperature-1 next-token distribution under `params` given `context`.
pub fn distribution(params: &PolicyParams, context: &[Token]) -> Result<TokenDistribution> {
    let mut feats = Vec::with_capacity(params.context_width + 1);
    params.active_features(context, &mut feats)?;
    TokenDistribution::from_logits(params.logits_from_features(&feats))
}

/// `ln π(token | context)` at temperature 1.
pub fn log_prob(params: &PolicyParams, context: &[Token], token: Token) -> Result<f64> {
    check_token(params, token)?;
    Ok(distribution(params, context)?.log_prob(token))
}

fn check_token(params: &PolicyParams, token: Token) -> Result<()> {
    if token as usize >= params.vocab_size {
        return Err(Error::Input(format!("token id {token} out of range")));
    }
    Ok(())
}

/// Draw a token from `softmax(logits / temperature)`.
pub fn sample_token(dist: &TokenDistribution, temperature: f64, rng: &mut Rng) -> Result<Token> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let tempered;
    let probs = if temperature == 1.0 {
        &dist.probs
    } else {
        tempered = TokenDistribution::from_logits(dist.logits.iter().map(|l| l / temperature).collect())?;
        &tempered.probs
    };
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        cum += p;
        if u < cum {
            return Ok(i as Token);
        }
    }
    // u landed in the rounding gap above the cumulative sum
    Ok(last_positive as Token)
}

/// Shannon entropy `−Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn token_entropy(dist: &TokenDistribution) -> f64 {
    entropy_of_probs(&dist.probs)
}

pub fn entropy_of_probs(probs: &[f64]) -> f64 {
    let h: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.max(0.0)
}

/// Dense gradient with the same shape as [`PolicyParams`] weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    vocab_size: usize,
    feature_dim: usize,
    values: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self {
            vocab_size: params.vocab_size,
            feature_dim: params.feature_dim(),
            values: vec![0.0; params.weights.len()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: Token, feature: usize) -> f64 {
        self.values[row as usize * self.feature_dim + feature]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    /// `self += scale · (onehot(token) − probs) ⊗ features`.
    pub fn add_score(&mut self, features: &[usize], probs: &[f64], token: Token, scale: f64) {
        debug_assert_eq!(probs.len(), self.vocab_size);
        for (y, &p) in probs.iter().enumerate() {
            let coeff = scale * (if y == token as usize { 1.0 } else { 0.0 } - p);
            if coeff == 0.0 {
                continue;
            }
            let row = y * self.feature_dim;
            for &f in features {
                self.values[row + f] += coeff;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Exact gradient of `ln π(token | context)` with respect to the weights.
pub fn grad_log_prob(params: &PolicyParams, context: &[Token], token: Token) -> Result<Gradient> {
    check_token(params, token)?;
    let mut feats = Vec::with_capacity(params.context_width + 1);
    params.active_features(context, &mut feats)?;
    let dist = TokenDistribution::from_logits(params.logits_from_features(&feats))?;
    let mut g = Gradient::zeros_like(params);
    g.add_score(&feats, &dist.probs, token, 1.0);
    Ok(g)
}
