//! The speculative decode loop, the autoregressive baseline and the metrics
//! derived from their traces.
//!
//! Metrics are always recomputed from a [`DecodeTrace`]; the decoder never
//! keeps separate counters, so replaying a persisted trace gives the same
//! numbers.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, EOS};
use crate::db::context::DEFAULT_CAPACITY;
use crate::db::ContextDb;
use crate::draft::{hierarchical_draft, AccessLog, DbKind, DbSet, DraftSet, HierarchyConfig, SharedDbs};
use crate::error::{Error, Result};
use crate::model::{score_positions, ModelCallCounter, TargetModel};
use crate::verify::{attribute_verify_success, verify, DbTallies, StepOutcome};

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    pub hierarchy: HierarchyConfig,
    /// Feed the model-preferred tokens of each step back into the context DB.
    pub recycle: bool,
    /// Return the per-step trace alongside the output.
    pub trace: bool,
    /// Pair capacity of the context database.
    pub context_capacity: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_tokens: 1024,
            temperature: 0.0,
            seed: 7,
            hierarchy: HierarchyConfig::default(),
            recycle: true,
            trace: false,
            context_capacity: DEFAULT_CAPACITY,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::InvalidArgument("max_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid temperature {}", self.temperature)));
        }
        if self.context_capacity == 0 {
            return Err(Error::InvalidArgument("context capacity must be >= 1".into()));
        }
        self.hierarchy.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Last `l` context tokens before the step.
    pub context_tail: Vec<TokenId>,
    pub access: AccessLog,
    pub outcome: StepOutcome,
    /// Emitted tokens that made it into the output (EOS / length cut).
    pub kept: usize,
    pub draft_elapsed_ns: u64,
    /// Context DB pairs after the step's updates.
    pub context_db_size: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub prompt: Vec<TokenId>,
    pub steps: Vec<StepRecord>,
    pub wall_time_ns: u64,
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    prompt: Vec<TokenId>,
    steps: usize,
    wall_time_ns: u64,
}

impl DecodeTrace {
    /// Output tokens reconstructed from the kept part of every step.
    pub fn output(&self) -> Vec<TokenId> {
        self.steps
            .iter()
            .flat_map(|s| s.outcome.emitted[..s.kept].iter().copied())
            .collect()
    }

    pub fn clear_timings(&mut self) {
        self.wall_time_ns = 0;
        for s in &mut self.steps {
            s.draft_elapsed_ns = 0;
            s.outcome.verify_elapsed_ns = 0;
            s.access.clear_timings();
        }
    }

    /// A header line followed by one line per step.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&TraceHeader {
            prompt: self.prompt.clone(),
            steps: self.steps.len(),
            wall_time_ns: self.wall_time_ns,
        })?;
        out.push('\n');
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: TraceHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::InvalidArgument("empty trace".into()))?,
        )?;
        let steps = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<StepRecord>, _>>()?;
        if steps.len() != header.steps {
            return Err(Error::InvalidArgument(format!(
                "trace header announces {} steps, found {}",
                header.steps,
                steps.len()
            )));
        }
        Ok(DecodeTrace {
            prompt: header.prompt,
            steps,
            wall_time_ns: header.wall_time_ns,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerDbLatency {
    pub c: f64,
    pub m: f64,
    pub s: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DraftLatency {
    pub mean: f64,
    pub stddev: f64,
    /// Mean nanoseconds per attempted probe of each database.
    pub per_db: PerDbLatency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeMetrics {
    pub steps: u64,
    pub tokens_generated: u64,
    pub accepted_tokens: u64,
    pub drafted_tokens: u64,
    /// Accepted over drafted tokens of the winning candidates.
    pub alpha: Option<f64>,
    /// Accepted over drafted tokens across every candidate.
    pub alpha_all: Option<f64>,
    pub tau: f64,
    pub draft_latency_ns: DraftLatency,
    pub verify_latency_ns: f64,
    pub wall_time_ns: u64,
    pub tallies: DbTallies,
    pub speedup: Option<f64>,
}

impl DecodeMetrics {
    pub fn from_trace(trace: &DecodeTrace) -> Result<Self> {
        aggregate_metrics(std::slice::from_ref(trace))
    }

    pub fn clear_timings(&mut self) {
        self.draft_latency_ns = DraftLatency::default();
        self.verify_latency_ns = 0.0;
        self.wall_time_ns = 0;
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Step-weighted metrics over every step of every trace.
pub fn aggregate_metrics(traces: &[DecodeTrace]) -> Result<DecodeMetrics> {
    if traces.is_empty() {
        return Err(Error::InvalidArgument("no traces to aggregate".into()));
    }
    let steps: Vec<&StepRecord> = traces.iter().flat_map(|t| &t.steps).collect();
    let n = steps.len() as u64;
    let tokens: u64 = steps.iter().map(|s| s.kept as u64).sum();
    let accepted: u64 = steps.iter().map(|s| s.outcome.accepted() as u64).sum();
    let drafted: u64 = steps.iter().map(|s| s.outcome.winner_len() as u64).sum();
    let accepted_all: u64 = steps
        .iter()
        .map(|s| s.outcome.accepted_len.iter().sum::<usize>() as u64)
        .sum();
    let drafted_all: u64 = steps.iter().map(|s| s.outcome.drafted_total as u64).sum();

    let mut tallies = DbTallies::default();
    for s in &steps {
        tallies.add(&attribute_verify_success(&s.outcome, &s.access)?);
    }

    let mean = |xs: &mut dyn Iterator<Item = u64>| {
        let (sum, count) = xs.fold((0f64, 0u64), |(s, c), x| (s + x as f64, c + 1));
        if count == 0 { 0.0 } else { sum / count as f64 }
    };
    let draft_mean = mean(&mut steps.iter().map(|s| s.draft_elapsed_ns));
    let draft_var = if n == 0 {
        0.0
    } else {
        steps
            .iter()
            .map(|s| (s.draft_elapsed_ns as f64 - draft_mean).powi(2))
            .sum::<f64>()
            / n as f64
    };
    let per_db = |db: DbKind| {
        mean(&mut steps
            .iter()
            .filter_map(|s| s.access.get(db).filter(|e| e.attempted).map(|e| e.elapsed_ns)))
    };

    Ok(DecodeMetrics {
        steps: n,
        tokens_generated: tokens,
        accepted_tokens: accepted,
        drafted_tokens: drafted,
        alpha: ratio(accepted, drafted),
        alpha_all: ratio(accepted_all, drafted_all),
        tau: ratio(tokens, n).unwrap_or(0.0),
        draft_latency_ns: DraftLatency {
            mean: draft_mean,
            stddev: draft_var.sqrt(),
            per_db: PerDbLatency {
                c: per_db(DbKind::Context),
                m: per_db(DbKind::Model),
                s: per_db(DbKind::Stats),
            },
        },
        verify_latency_ns: mean(&mut steps.iter().map(|s| s.outcome.verify_elapsed_ns)),
        wall_time_ns: traces.iter().map(|t| t.wall_time_ns).sum(),
        tallies,
        speedup: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// Generated tokens, prompt excluded.
    pub tokens: Vec<TokenId>,
    pub metrics: DecodeMetrics,
    pub trace: Option<DecodeTrace>,
}

fn check_prompt<M: TargetModel + ?Sized>(model: &M, prompt: &[TokenId]) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::MalformedPrompt("empty prompt"));
    }
    if prompt.contains(&EOS) {
        return Err(Error::MalformedPrompt("prompt contains EOS"));
    }
    if let Some(&t) = prompt.iter().find(|&&t| t as usize >= model.vocab_size()) {
        return Err(Error::UnknownTokenId(t));
    }
    Ok(())
}

/// Number of `emitted` tokens that fit before `budget` runs out, cutting
/// after the first EOS.
fn keep_len(emitted: &[TokenId], budget: usize) -> usize {
    let upto_eos = emitted.iter().position(|&t| t == EOS).map_or(emitted.len(), |i| i + 1);
    upto_eos.min(budget)
}

/// A decode session owning the context database and the call counter.
///
/// The context database is reset at the start of every [`Decoder::run`], so
/// sessions can be reused across prompts without leaking state.
pub struct Decoder<'a, M: TargetModel + ?Sized> {
    model: &'a M,
    shared: SharedDbs<'a>,
    config: DecodeConfig,
    context_db: ContextDb,
    counter: ModelCallCounter,
}

impl<'a, M: TargetModel + ?Sized> Decoder<'a, M> {
    pub fn new(model: &'a M, shared: SharedDbs<'a>, config: DecodeConfig) -> Result<Self> {
        config.validate()?;
        let enabled = config.hierarchy.enabled;
        if enabled.contains(DbKind::Model) && shared.model.is_none() {
            return Err(Error::InvalidArgument("model database enabled but not provided".into()));
        }
        if enabled.contains(DbKind::Stats) && shared.stats.is_none() {
            return Err(Error::InvalidArgument("statistics database enabled but not provided".into()));
        }
        let h = &config.hierarchy;
        let context_db = ContextDb::new(h.max_candidates, h.draft_len, config.context_capacity);
        Ok(Decoder {
            model,
            shared,
            config,
            context_db,
            counter: ModelCallCounter::new(),
        })
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.config
    }

    pub fn calls(&self) -> u64 {
        self.counter.calls
    }

    pub fn context_db(&self) -> &ContextDb {
        &self.context_db
    }

    pub fn run(&mut self, prompt: &[TokenId]) -> Result<DecodeOutput> {
        self.run_seeded(prompt, self.config.seed)
    }

    pub fn run_seeded(&mut self, prompt: &[TokenId], seed: u64) -> Result<DecodeOutput> {
        check_prompt(self.model, prompt)?;
        let started = Instant::now();
        let cfg = &self.config;
        let m = cfg.hierarchy.draft_len;
        let l = cfg.hierarchy.prefix_len;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        self.context_db.reset();
        self.context_db.ingest(prompt);

        let mut tokens = prompt.to_vec();
        let mut generated = 0usize;
        let mut trace = DecodeTrace {
            prompt: prompt.to_vec(),
            ..Default::default()
        };
        while generated < cfg.max_tokens && tokens.last() != Some(&EOS) {
            let t0 = Instant::now();
            let (set, access) = hierarchical_draft(&tokens, &mut self.context_db, self.shared, &cfg.hierarchy);
            let draft_elapsed_ns = t0.elapsed().as_nanos() as u64;
            let outcome = verify(self.model, &tokens, &set, cfg.temperature, &mut rng, &mut self.counter)?;

            let kept = keep_len(&outcome.emitted, cfg.max_tokens - generated);
            let old_len = tokens.len();
            tokens.extend_from_slice(&outcome.emitted[..kept]);
            generated += kept;

            self.context_db.ingest(&tokens[old_len - (m + 1).min(old_len)..]);
            if cfg.recycle {
                let mut seq = Vec::with_capacity(outcome.recycled.len() + 1);
                seq.push(tokens[old_len - 1]);
                seq.extend_from_slice(&outcome.recycled);
                self.context_db.ingest(&seq);
            }

            trace.steps.push(StepRecord {
                context_tail: tokens[old_len.saturating_sub(l)..old_len].to_vec(),
                access,
                outcome,
                kept,
                draft_elapsed_ns,
                context_db_size: self.context_db.len(),
            });
        }
        trace.wall_time_ns = started.elapsed().as_nanos() as u64;

        let metrics = DecodeMetrics::from_trace(&trace)?;
        Ok(DecodeOutput {
            tokens: tokens[prompt.len()..].to_vec(),
            metrics,
            trace: self.config.trace.then_some(trace),
        })
    }
}

/// Speculative decoding of `prompt` with hierarchical drafting.
pub fn decode<M: TargetModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    shared: SharedDbs<'_>,
    config: &DecodeConfig,
) -> Result<DecodeOutput> {
    Decoder::new(model, shared, config.clone())?.run(prompt)
}

/// Decodes every prompt with seed `config.seed + index`. With `parallel`
/// the sessions run on the rayon pool; results are identical either way.
pub fn decode_batch<M: TargetModel + ?Sized>(
    model: &M,
    prompts: &[Vec<TokenId>],
    shared: SharedDbs<'_>,
    config: &DecodeConfig,
    parallel: bool,
) -> Result<Vec<DecodeOutput>> {
    let one = |(i, p): (usize, &Vec<TokenId>)| {
        Decoder::new(model, shared, config.clone())?.run_seeded(p, config.seed.wrapping_add(i as u64))
    };
    if parallel {
        prompts.par_iter().enumerate().map(one).collect()
    } else {
        prompts.iter().enumerate().map(one).collect()
    }
}

/// One model call per token. Produces a trace of draft-free steps so the
/// same metric code applies; `alpha` is `None`.
pub fn autoregressive_decode<M: TargetModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    config: &DecodeConfig,
) -> Result<DecodeOutput> {
    config.validate()?;
    check_prompt(model, prompt)?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut counter = ModelCallCounter::new();
    let mut tokens = prompt.to_vec();
    let l = config.hierarchy.prefix_len;
    let mut trace = DecodeTrace {
        prompt: prompt.to_vec(),
        ..Default::default()
    };
    let empty = DraftSet::default();
    while trace.steps.len() < config.max_tokens && tokens.last() != Some(&EOS) {
        let t0 = Instant::now();
        let next = if config.temperature == 0.0 {
            counter.forward(model);
            model.greedy_next(&tokens)
        } else {
            let dist = score_positions(model, &tokens, &[], &mut counter).remove(0);
            dist.with_temperature(config.temperature)?.sample(&mut rng)
        };
        let mut outcome = StepOutcome::for_set(&empty);
        outcome.emitted.push(next);
        outcome.verify_elapsed_ns = t0.elapsed().as_nanos() as u64;
        trace.steps.push(StepRecord {
            context_tail: tokens[tokens.len().saturating_sub(l)..].to_vec(),
            access: AccessLog::default(),
            outcome,
            kept: 1,
            draft_elapsed_ns: 0,
            context_db_size: 0,
        });
        tokens.push(next);
    }
    trace.wall_time_ns = started.elapsed().as_nanos() as u64;
    let metrics = DecodeMetrics::from_trace(&trace)?;
    debug_assert_eq!(metrics.steps, counter.calls);
    Ok(DecodeOutput {
        tokens: tokens[prompt.len()..].to_vec(),
        metrics,
        trace: config.trace.then_some(trace),
    })
}

/// Hierarchy config with every database switched off.
pub fn no_drafting(base: &HierarchyConfig) -> HierarchyConfig {
    HierarchyConfig {
        enabled: DbSet::NONE,
        ..base.clone()
    }
}

/// Concatenates several traces into one JSONL document.
pub fn write_trace_bundle(traces: &[DecodeTrace]) -> Result<String> {
    let mut out = String::new();
    for t in traces {
        out.push_str(&t.to_jsonl()?);
    }
    Ok(out)
}

/// Splits a document written by [`write_trace_bundle`] back into traces.
pub fn read_trace_bundle(text: &str) -> Result<Vec<DecodeTrace>> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut traces = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let header: TraceHeader = serde_json::from_str(lines[i])?;
        let end = i + 1 + header.steps;
        if end > lines.len() {
            return Err(Error::InvalidArgument("trace bundle is truncated".into()));
        }
        traces.push(DecodeTrace::from_jsonl(&lines[i..end].join("\n"))?);
        i = end;
    }
    Ok(traces)
}
