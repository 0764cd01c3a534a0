//! Target-model contract and the k-gram backoff reference model.
//!
//! A [`TargetModel`] maps a context to a next-token distribution. Every
//! counted forward pass goes through [`ModelCallCounter::forward`], which is
//! what the engine's step accounting is built on.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::binfmt::{Reader, Writer};
use crate::corpus::{Corpus, TokenId};
use crate::error::{Error, Result};

/// Probability per token id.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDistribution {
    pub probs: Vec<f64>,
}

impl NextTokenDistribution {
    pub fn new(probs: Vec<f64>) -> Self {
        NextTokenDistribution { probs }
    }

    pub fn uniform(vocab_size: usize) -> Self {
        NextTokenDistribution {
            probs: vec![1.0 / vocab_size as f64; vocab_size],
        }
    }

    pub fn point_mass(vocab_size: usize, token: TokenId) -> Self {
        let mut probs = vec![0.0; vocab_size];
        probs[token as usize] = 1.0;
        NextTokenDistribution { probs }
    }

    /// Highest-probability token; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.probs.iter().all(|&p| p >= 0.0 && p.is_finite())
            && (self.probs.iter().sum::<f64>() - 1.0).abs() <= tol
    }

    /// Sharpens or flattens the distribution: `T == 0` is a point mass at the
    /// argmax, otherwise probabilities become proportional to `p^(1/T)`.
    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be a finite non-negative number, got {temperature}"
            )));
        }
        if temperature == 0.0 {
            return Ok(Self::point_mass(self.probs.len(), self.argmax()));
        }
        if temperature == 1.0 {
            return Ok(self.clone());
        }
        let max_log = self.probs[self.argmax() as usize].ln();
        let inv_t = 1.0 / temperature;
        let mut probs: Vec<f64> = self
            .probs
            .iter()
            .map(|&p| if p > 0.0 { ((p.ln() - max_log) * inv_t).exp() } else { 0.0 })
            .collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        Ok(NextTokenDistribution { probs })
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut last_nonzero = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                cum += p;
                last_nonzero = i;
                if u < cum {
                    return i as TokenId;
                }
            }
        }
        last_nonzero as TokenId
    }
}

/// The model being accelerated.
pub trait TargetModel: Sync {
    fn vocab_size(&self) -> usize;

    /// Pure function of the context.
    fn next_distribution(&self, context: &[TokenId]) -> NextTokenDistribution;

    /// Must agree with `next_distribution(context).argmax()`.
    fn greedy_next(&self, context: &[TokenId]) -> TokenId {
        self.next_distribution(context).argmax()
    }

    /// How many trailing context tokens the model looks at, if bounded.
    fn context_window(&self) -> Option<usize> {
        None
    }

    /// Runs once per counted forward pass.
    fn forward_overhead(&self) {}
}

/// Counts forward passes of the target model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ModelCallCounter {
    pub calls: u64,
}

impl ModelCallCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accounts for one forward pass and pays the model's per-pass cost.
    pub fn forward<M: TargetModel + ?Sized>(&mut self, model: &M) {
        self.calls += 1;
        model.forward_overhead();
    }
}

/// The slice of `context` the model can see.
pub fn visible_context<'a, M: TargetModel + ?Sized>(model: &M, context: &'a [TokenId]) -> &'a [TokenId] {
    match model.context_window() {
        Some(w) if context.len() > w => &context[context.len() - w..],
        _ => context,
    }
}

/// Scores `context ++ draft[..j]` for every `j` in `0..=draft.len()` as one
/// forward pass.
pub fn score_positions<M: TargetModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    draft: &[TokenId],
    counter: &mut ModelCallCounter,
) -> Vec<NextTokenDistribution> {
    counter.forward(model);
    let mut buf = visible_context(model, context).to_vec();
    let mut out = Vec::with_capacity(draft.len() + 1);
    out.push(model.next_distribution(&buf));
    for &t in draft {
        buf.push(t);
        out.push(model.next_distribution(&buf));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
struct NextCounts {
    total: u64,
    /// Sorted by token id.
    counts: Vec<(TokenId, u64)>,
    argmax: TokenId,
}

impl NextCounts {
    fn from_map(map: HashMap<TokenId, u64>) -> Self {
        let mut counts: Vec<(TokenId, u64)> = map.into_iter().collect();
        counts.sort_unstable();
        let total = counts.iter().map(|&(_, c)| c).sum();
        let mut argmax = counts[0];
        for &(t, c) in &counts[1..] {
            if c > argmax.1 {
                argmax = (t, c);
            }
        }
        NextCounts {
            total,
            counts,
            argmax: argmax.0,
        }
    }
}

/// Add-alpha smoothed k-gram model that backs off to the longest context
/// suffix it has seen.
#[derive(Debug, Clone)]
pub struct KGramModel {
    order: usize,
    alpha: f64,
    vocab_size: usize,
    /// `tables[j]` holds contexts of length `j`, for `j < order`.
    tables: Vec<HashMap<Vec<TokenId>, NextCounts>>,
    call_cost: Duration,
}

impl PartialEq for KGramModel {
    fn eq(&self, other: &Self) -> bool {
        self.order == other.order
            && self.alpha.to_bits() == other.alpha.to_bits()
            && self.vocab_size == other.vocab_size
            && self.tables == other.tables
    }
}

impl KGramModel {
    /// Counts every (context, next) pair of orders `1..=k` in each document,
    /// EOS terminators included.
    pub fn fit(corpus: &Corpus, k: usize, alpha: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("k-gram order must be >= 1".into()));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
        }
        if corpus.token_count() == 0 {
            return Err(Error::EmptyCorpus);
        }
        let vocab_size = corpus.vocab.size();
        let mut raw: Vec<HashMap<Vec<TokenId>, HashMap<TokenId, u64>>> = vec![HashMap::new(); k];
        for doc in &corpus.docs {
            for (i, &next) in doc.iter().enumerate() {
                if next as usize >= vocab_size {
                    return Err(Error::UnknownTokenId(next));
                }
                for ctx_len in 0..k.min(i + 1) {
                    let ctx = &doc[i - ctx_len..i];
                    *raw[ctx_len]
                        .entry(ctx.to_vec())
                        .or_default()
                        .entry(next)
                        .or_insert(0) += 1;
                }
            }
        }
        let tables = raw
            .into_iter()
            .map(|t| t.into_iter().map(|(c, m)| (c, NextCounts::from_map(m))).collect())
            .collect();
        Ok(KGramModel {
            order: k,
            alpha,
            vocab_size,
            tables,
            call_cost: Duration::ZERO,
        })
    }

    /// Adds a fixed busy-wait to every counted forward pass.
    pub fn with_call_cost(mut self, cost: Duration) -> Self {
        self.call_cost = cost;
        self
    }

    pub fn set_call_cost(&mut self, cost: Duration) {
        self.call_cost = cost;
    }

    pub fn call_cost(&self) -> Duration {
        self.call_cost
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Raw count of `next` after exactly `context` (`|context| < k`).
    pub fn count(&self, context: &[TokenId], next: TokenId) -> u64 {
        self.tables
            .get(context.len())
            .and_then(|t| t.get(context))
            .and_then(|nc| nc.counts.binary_search_by_key(&next, |&(t, _)| t).ok().map(|i| nc.counts[i].1))
            .unwrap_or(0)
    }

    /// Number of (context, next) events recorded at the given order.
    pub fn total_events(&self, order: usize) -> u64 {
        self.tables[order - 1].values().map(|nc| nc.total).sum()
    }

    fn backoff(&self, context: &[TokenId]) -> Option<&NextCounts> {
        let longest = context.len().min(self.order - 1);
        (0..=longest).rev().find_map(|len| {
            self.tables[len]
                .get(&context[context.len() - len..])
                .filter(|nc| nc.total > 0)
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// `"HDKG"`, version, k, vocab size, alpha bits, then per context length a
    /// lexicographically sorted list of contexts with their next-token counts.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(KGRAM_MAGIC, KGRAM_VERSION);
        w.u32(self.order as u32);
        w.u32(self.vocab_size as u32);
        w.u64(self.alpha.to_bits());
        for table in &self.tables {
            let mut contexts: Vec<&Vec<TokenId>> = table.keys().collect();
            contexts.sort_unstable();
            w.u64(contexts.len() as u64);
            for ctx in contexts {
                let nc = &table[ctx];
                w.u32s(ctx);
                w.u32(nc.counts.len() as u32);
                for &(t, c) in &nc.counts {
                    w.u32(t);
                    w.u64(c);
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::UnsupportedKGramFile(msg.to_owned());
        let mut r = Reader::new(bytes);
        if r.take(4) != Some(KGRAM_MAGIC.as_slice()) {
            return Err(bad("bad magic"));
        }
        if r.u32() != Some(KGRAM_VERSION) {
            return Err(bad("unsupported version"));
        }
        let truncated = || bad("truncated");
        let order = r.u32().ok_or_else(truncated)? as usize;
        let vocab_size = r.u32().ok_or_else(truncated)? as usize;
        let alpha = f64::from_bits(r.u64().ok_or_else(truncated)?);
        if order == 0 || !(alpha > 0.0) {
            return Err(bad("invalid header"));
        }
        let mut tables = Vec::with_capacity(order);
        for ctx_len in 0..order {
            let n = r.u64().ok_or_else(truncated)?;
            let mut table = HashMap::new();
            for _ in 0..n {
                let ctx = r.u32s(ctx_len).ok_or_else(truncated)?;
                let n_next = r.u32().ok_or_else(truncated)? as usize;
                if n_next == 0 {
                    return Err(bad("empty context entry"));
                }
                let mut map = HashMap::with_capacity(n_next);
                for _ in 0..n_next {
                    let t = r.u32().ok_or_else(truncated)?;
                    let c = r.u64().ok_or_else(truncated)?;
                    if t as usize >= vocab_size {
                        return Err(bad("token id out of range"));
                    }
                    map.insert(t, c);
                }
                table.insert(ctx, NextCounts::from_map(map));
            }
            tables.push(table);
        }
        if r.remaining() != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(KGramModel {
            order,
            alpha,
            vocab_size,
            tables,
            call_cost: Duration::ZERO,
        })
    }
}

const KGRAM_MAGIC: &[u8; 4] = b"HDKG";
const KGRAM_VERSION: u32 = 1;

impl TargetModel for KGramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_distribution(&self, context: &[TokenId]) -> NextTokenDistribution {
        let Some(nc) = self.backoff(context) else {
            return NextTokenDistribution::uniform(self.vocab_size);
        };
        let denom = nc.total as f64 + self.alpha * self.vocab_size as f64;
        let mut probs = vec![self.alpha / denom; self.vocab_size];
        for &(t, c) in &nc.counts {
            probs[t as usize] = (c as f64 + self.alpha) / denom;
        }
        NextTokenDistribution { probs }
    }

    fn greedy_next(&self, context: &[TokenId]) -> TokenId {
        match self.backoff(context) {
            Some(nc) => nc.argmax,
            None => 0,
        }
    }

    fn context_window(&self) -> Option<usize> {
        Some(self.order - 1)
    }

    fn forward_overhead(&self) {
        if self.call_cost.is_zero() {
            return;
        }
        let start = Instant::now();
        while start.elapsed() < self.call_cost {
            std::hint::spin_loop();
        }
    }
}
