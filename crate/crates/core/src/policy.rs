//! Tabular autoregressive policy.
//!
//! Next-token logits are indexed by (context bucket, previous token). A
//! context bucket is a stable hash of the task instance, so every instance
//! gets its own bigram table (up to collisions). Logits are a fixed base
//! table shared by all buckets plus a sparse trainable offset per
//! (bucket, previous token) row; rows that were never touched cost nothing.
//!
//! Log-probabilities and gradients are exact: the gradient of
//! `log p(y | row)` with respect to the row logits is `onehot(y) - p`.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::TaskInstance;

pub type TokenId = u16;

pub const EOS: &str = "<eos>";
pub const MAX_VOCAB: usize = 128;
pub const DEFAULT_HORIZON: usize = 32;
pub const DEFAULT_BUCKETS: u32 = 4096;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("token id {0} outside the vocabulary")]
    TokenOutOfRange(TokenId),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("parameter shape mismatch: {0}")]
    Shape(String),
}

/// Ordered set of atomic symbols. Rendering joins symbols with single spaces
/// and stops at end-of-sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, TokenId>,
    eos: TokenId,
    max_symbol_len: usize,
}

impl Vocabulary {
    pub fn new<I, S>(symbols: I) -> Result<Self, PolicyError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let symbols: Vec<String> = symbols.into_iter().map(Into::into).collect();
        if symbols.len() > MAX_VOCAB {
            return Err(PolicyError::InvalidVocabulary(format!(
                "{} symbols exceeds the limit of {MAX_VOCAB}",
                symbols.len()
            )));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(PolicyError::InvalidVocabulary(format!("symbol {s:?} is empty or has whitespace")));
            }
            if index.insert(s.clone(), i as TokenId).is_some() {
                return Err(PolicyError::InvalidVocabulary(format!("duplicate symbol {s:?}")));
            }
        }
        let eos = *index
            .get(EOS)
            .ok_or_else(|| PolicyError::InvalidVocabulary(format!("missing {EOS}")))?;
        let max_symbol_len = symbols.iter().map(String::len).max().unwrap_or(0);
        Ok(Vocabulary {
            symbols,
            index,
            eos,
            max_symbol_len,
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    /// Virtual previous-token index used at the first step.
    pub fn bos(&self) -> TokenId {
        self.symbols.len() as TokenId
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn ids<'a>(&self, symbols: impl IntoIterator<Item = &'a str>) -> Result<Vec<TokenId>, PolicyError> {
        symbols
            .into_iter()
            .map(|s| self.id(s).ok_or_else(|| PolicyError::UnknownToken(s.to_string())))
            .collect()
    }

    /// Text of a token sequence, truncated at the first end-of-sequence.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t != self.eos)
            .filter_map(|&t| self.symbol(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn longest_prefix(&self, s: &str) -> Option<(TokenId, usize)> {
        let mut end = s.len().min(self.max_symbol_len);
        while end > 0 {
            if s.is_char_boundary(end) {
                if let Some(&id) = self.index.get(&s[..end]) {
                    return Some((id, end));
                }
            }
            end -= 1;
        }
        None
    }

    /// Greedy longest-match tokenisation of each whitespace-separated chunk.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, PolicyError> {
        let mut out = Vec::new();
        for chunk in text.split_whitespace() {
            let mut rest = chunk;
            while !rest.is_empty() {
                let (id, n) = self
                    .longest_prefix(rest)
                    .ok_or_else(|| PolicyError::UnknownToken(rest.to_string()))?;
                out.push(id);
                rest = &rest[n..];
            }
        }
        Ok(out)
    }

    /// Token count of one chunk; an unmatched remainder counts as one token.
    pub fn count_tokens_in(&self, chunk: &str) -> usize {
        let mut rest = chunk;
        let mut n = 0;
        while !rest.is_empty() {
            n += 1;
            match self.longest_prefix(rest) {
                Some((_, len)) => rest = &rest[len..],
                None => break,
            }
        }
        n
    }
}

/// FNV-1a, stable across platforms and releases.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn canonical(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Context bucket of an instance: hash of task kind, observation and question.
pub fn bucket_of(instance: &TaskInstance, buckets: u32) -> u32 {
    let key = format!(
        "{}\u{1f}{}\u{1f}{}",
        instance.task.name(),
        canonical(&instance.context),
        canonical(&instance.question)
    );
    (stable_hash(key.as_bytes()) % u64::from(buckets.max(1))) as u32
}

/// Bucket id of the context-free rows shared by every prompt.
pub const SHARED_BUCKET: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub bucket: u32,
    pub prev: TokenId,
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Sparse gradient (or update) over policy rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    rows: BTreeMap<RowKey, Vec<f64>>,
    width: usize,
}

impl Gradient {
    pub fn new(width: usize) -> Self {
        Gradient {
            rows: BTreeMap::new(),
            width,
        }
    }

    pub fn row_mut(&mut self, key: RowKey) -> &mut Vec<f64> {
        let width = self.width;
        self.rows.entry(key).or_insert_with(|| vec![0.0; width])
    }

    pub fn rows(&self) -> impl Iterator<Item = (&RowKey, &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn get(&self, key: RowKey, next: TokenId) -> f64 {
        self.rows.get(&key).map_or(0.0, |r| r[next as usize])
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `self += scale * other`, row order independent of insertion order.
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (k, row) in &other.rows {
            let dst = self.row_mut(*k);
            for (d, s) in dst.iter_mut().zip(row) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for row in self.rows.values_mut() {
            row.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.rows.values().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.rows.values().flatten().all(|v| v.is_finite())
    }
}

/// Allowed successors per previous token (index `vocab.len()` is the start).
#[derive(Debug, Clone, Default)]
pub struct BigramPrior {
    successors: BTreeMap<TokenId, Vec<TokenId>>,
}

impl BigramPrior {
    pub fn allow(&mut self, prev: TokenId, next: impl IntoIterator<Item = TokenId>) {
        let entry = self.successors.entry(prev).or_default();
        for n in next {
            if !entry.contains(&n) {
                entry.push(n);
            }
        }
    }

    pub fn successors(&self, prev: TokenId) -> &[TokenId] {
        self.successors.get(&prev).map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularSeqPolicy {
    vocab: Vocabulary,
    horizon: usize,
    buckets: u32,
    /// (V + 1) x V, row-major by previous token.
    base: Vec<f64>,
    rows: BTreeMap<RowKey, Vec<f64>>,
}

impl TabularSeqPolicy {
    pub fn uniform(vocab: Vocabulary, horizon: usize, buckets: u32) -> Self {
        let v = vocab.len();
        TabularSeqPolicy {
            base: vec![0.0; (v + 1) * v],
            vocab,
            horizon,
            buckets: buckets.max(1),
            rows: BTreeMap::new(),
        }
    }

    /// Initial policy whose logits favour `prior` successors by `strength` nats.
    pub fn with_prior(vocab: Vocabulary, horizon: usize, buckets: u32, prior: &BigramPrior, strength: f64) -> Self {
        let mut p = Self::uniform(vocab, horizon, buckets);
        let v = p.vocab.len();
        for prev in 0..=v {
            for &next in prior.successors(prev as TokenId) {
                p.base[prev * v + next as usize] = strength;
            }
        }
        p
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn buckets(&self) -> u32 {
        self.buckets
    }

    pub fn bucket(&self, instance: &TaskInstance) -> u32 {
        bucket_of(instance, self.buckets)
    }

    /// Logits of a context: frozen base row, plus the shared row for `key.prev`,
    /// plus the bucket's own row.
    pub fn logits(&self, key: RowKey) -> Vec<f64> {
        let v = self.vocab.len();
        let start = key.prev as usize * v;
        let mut z = self.base[start..start + v].to_vec();
        for k in Self::trainable(key) {
            if let Some(row) = self.rows.get(&k) {
                z.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
        }
        z
    }

    fn trainable(key: RowKey) -> [RowKey; 2] {
        [
            RowKey {
                bucket: SHARED_BUCKET,
                prev: key.prev,
            },
            key,
        ]
    }

    /// Add `d[k]` to both trainable rows behind `key`.
    fn add_grad(grad: &mut Gradient, key: RowKey, d: &[f64]) {
        for k in Self::trainable(key) {
            grad.row_mut(k).iter_mut().zip(d).for_each(|(g, x)| *g += x);
        }
    }

    pub fn log_probs(&self, key: RowKey) -> Vec<f64> {
        log_softmax(&self.logits(key))
    }

    /// Set explicit logits for one row (offsets from the base table).
    pub fn set_row(&mut self, key: RowKey, logits: Vec<f64>) -> Result<(), PolicyError> {
        if logits.len() != self.vocab.len() {
            return Err(PolicyError::Shape(format!("row of {} for vocab of {}", logits.len(), self.vocab.len())));
        }
        self.rows.insert(key, logits);
        Ok(())
    }

    fn check(&self, tokens: &[TokenId]) -> Result<(), PolicyError> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab.len()) {
            Some(&t) => Err(PolicyError::TokenOutOfRange(t)),
            None => Ok(()),
        }
    }

    /// Autoregressive sample within `bucket`, stopping at end-of-sequence or
    /// the horizon. Returns the tokens and their log-probability.
    pub fn sample_in_bucket<R: Rng + ?Sized>(&self, bucket: u32, rng: &mut R) -> (Vec<TokenId>, f64) {
        let mut tokens = Vec::new();
        let mut logprob = 0.0;
        let mut prev = self.vocab.bos();
        while tokens.len() < self.horizon {
            let lp = self.log_probs(RowKey { bucket, prev });
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = lp.len() - 1;
            for (i, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            logprob += lp[pick];
            let tok = pick as TokenId;
            tokens.push(tok);
            if tok == self.vocab.eos() {
                break;
            }
            prev = tok;
        }
        (tokens, logprob)
    }

    pub fn sample_sequence<R: Rng + ?Sized>(&self, instance: &TaskInstance, rng: &mut R) -> (Vec<TokenId>, f64) {
        self.sample_in_bucket(self.bucket(instance), rng)
    }

    /// Argmax decoding (lowest id wins ties).
    pub fn greedy(&self, instance: &TaskInstance) -> Vec<TokenId> {
        let bucket = self.bucket(instance);
        let mut tokens = Vec::new();
        let mut prev = self.vocab.bos();
        while tokens.len() < self.horizon {
            let z = self.logits(RowKey { bucket, prev });
            let mut best = 0;
            for (i, v) in z.iter().enumerate() {
                if *v > z[best] {
                    best = i;
                }
            }
            let tok = best as TokenId;
            tokens.push(tok);
            if tok == self.vocab.eos() {
                break;
            }
            prev = tok;
        }
        tokens
    }

    fn contexts<'a>(&self, bucket: u32, tokens: &'a [TokenId]) -> impl Iterator<Item = (RowKey, TokenId)> + 'a {
        let bos = self.vocab.bos();
        tokens.iter().enumerate().map(move |(t, &y)| {
            let prev = if t == 0 { bos } else { tokens[t - 1] };
            (RowKey { bucket, prev }, y)
        })
    }

    pub fn sequence_logprob(&self, instance: &TaskInstance, tokens: &[TokenId]) -> Result<f64, PolicyError> {
        self.check(tokens)?;
        let bucket = self.bucket(instance);
        Ok(self
            .contexts(bucket, tokens)
            .map(|(key, y)| self.log_probs(key)[y as usize])
            .sum())
    }

    /// Log-probability of `tokens`; adds `scale * d logprob / d theta` to `grad`.
    pub fn sequence_logprob_grad(
        &self,
        instance: &TaskInstance,
        tokens: &[TokenId],
        scale: f64,
        grad: &mut Gradient,
    ) -> Result<f64, PolicyError> {
        self.check(tokens)?;
        let bucket = self.bucket(instance);
        let mut total = 0.0;
        for (key, y) in self.contexts(bucket, tokens) {
            let lp = self.log_probs(key);
            total += lp[y as usize];
            if scale != 0.0 {
                let mut d: Vec<f64> = lp.iter().map(|l| -scale * l.exp()).collect();
                d[y as usize] += scale;
                Self::add_grad(grad, key, &d);
            }
        }
        Ok(total)
    }

    /// Sum over the trajectory's visited contexts of KL(self || reference).
    pub fn kl_divergence(&self, reference: &TabularSeqPolicy, instance: &TaskInstance, tokens: &[TokenId]) -> f64 {
        self.kl_grad(reference, instance, tokens, 0.0, &mut Gradient::new(self.vocab.len()))
    }

    /// KL as in [`Self::kl_divergence`]; adds `scale * dKL/dtheta` to `grad`.
    pub fn kl_grad(
        &self,
        reference: &TabularSeqPolicy,
        instance: &TaskInstance,
        tokens: &[TokenId],
        scale: f64,
        grad: &mut Gradient,
    ) -> f64 {
        let bucket = self.bucket(instance);
        let ref_bucket = reference.bucket(instance);
        let mut total = 0.0;
        for (key, _) in self.contexts(bucket, tokens) {
            let lp = self.log_probs(key);
            let lq = reference.log_probs(RowKey {
                bucket: ref_bucket,
                prev: key.prev,
            });
            let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
            let kl = kl.max(0.0);
            total += kl;
            if scale != 0.0 {
                let d: Vec<f64> = lp.iter().zip(&lq).map(|(a, b)| scale * a.exp() * ((a - b) - kl)).collect();
                Self::add_grad(grad, key, &d);
            }
        }
        total
    }

    /// `theta += step`.
    pub fn apply(&mut self, step: &Gradient) {
        let v = self.vocab.len();
        for (k, row) in step.rows() {
            let dst = self.rows.entry(*k).or_insert_with(|| vec![0.0; v]);
            dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }

    /// Trainable rows (offsets from the base table); shared rows use [`SHARED_BUCKET`].
    pub fn rows(&self) -> impl Iterator<Item = (&RowKey, &Vec<f64>)> {
        self.rows.iter()
    }

    /// Read one trainable parameter.
    pub fn param(&self, key: RowKey, next: TokenId) -> f64 {
        self.rows.get(&key).map_or(0.0, |r| r[next as usize])
    }

    /// Write one trainable parameter.
    pub fn set_param(&mut self, key: RowKey, next: TokenId, value: f64) {
        let v = self.vocab.len();
        self.rows.entry(key).or_insert_with(|| vec![0.0; v])[next as usize] = value;
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            symbols: self.vocab.symbols.clone(),
            horizon: self.horizon,
            buckets: self.buckets,
            base: self.base.clone(),
            rows: self
                .rows
                .iter()
                .map(|(k, v)| RowEntry {
                    bucket: k.bucket,
                    prev: k.prev,
                    logits: v.clone(),
                })
                .collect(),
        }
    }

    pub fn from_snapshot(s: PolicySnapshot) -> Result<Self, PolicyError> {
        let vocab = Vocabulary::new(s.symbols)?;
        let v = vocab.len();
        if s.base.len() != (v + 1) * v {
            return Err(PolicyError::Shape(format!("base table has {} entries, expected {}", s.base.len(), (v + 1) * v)));
        }
        let mut rows = BTreeMap::new();
        for r in s.rows {
            if r.logits.len() != v || r.prev as usize > v || (r.bucket >= s.buckets && r.bucket != SHARED_BUCKET) {
                return Err(PolicyError::Shape(format!("bad row ({}, {})", r.bucket, r.prev)));
            }
            rows.insert(RowKey { bucket: r.bucket, prev: r.prev }, r.logits);
        }
        Ok(TabularSeqPolicy {
            vocab,
            horizon: s.horizon,
            buckets: s.buckets.max(1),
            base: s.base,
            rows,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowEntry {
    pub bucket: u32,
    pub prev: TokenId,
    pub logits: Vec<f64>,
}

/// Serializable form of a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub symbols: Vec<String>,
    pub horizon: usize,
    pub buckets: u32,
    pub base: Vec<f64>,
    pub rows: Vec<RowEntry>,
}
