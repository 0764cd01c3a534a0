//! Benchmark harness: method comparison, access-order and database-subset
//! ablations.
//!
//! Every row is computed from decode traces by [`report_from_traces`], so a
//! report can be rebuilt from persisted traces. Timed runs are executed one
//! after another; a warm-up pass precedes them and is discarded.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analysis::{coverage_report, CoverageReport};
use crate::corpus::TokenId;
use crate::draft::{AccessOrder, DbKind, DbSet, HierarchyConfig, SharedDbs};
use crate::engine::{aggregate_metrics, autoregressive_decode, DecodeConfig, DecodeTrace, Decoder, PerDbLatency};
use crate::error::{Error, Result};
use crate::model::TargetModel;
use crate::verify::DbTallies;

pub const AR_ROW: &str = "ar";

/// One benchmark configuration, as read from a configs JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    /// Run the autoregressive baseline instead of drafting.
    #[serde(default)]
    pub autoregressive: bool,
    #[serde(default = "default_order")]
    pub order: String,
    #[serde(default = "default_databases")]
    pub databases: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_l")]
    pub l: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_true")]
    pub recycle: bool,
}

fn default_order() -> String {
    "cms".into()
}
fn default_databases() -> String {
    "c,m,s".into()
}
fn default_max_tokens() -> usize {
    1024
}
fn default_seed() -> u64 {
    7
}
fn default_n() -> usize {
    7
}
fn default_l() -> usize {
    2
}
fn default_m() -> usize {
    4
}
fn default_true() -> bool {
    true
}

impl RunSpec {
    pub fn from_config(name: impl Into<String>, config: &DecodeConfig) -> Self {
        let h = &config.hierarchy;
        RunSpec {
            name: name.into(),
            autoregressive: false,
            order: h.order.to_string(),
            databases: if h.enabled.is_empty() { "none".into() } else { h.enabled.to_string() },
            temperature: config.temperature,
            max_tokens: config.max_tokens,
            seed: config.seed,
            n: h.max_candidates,
            l: h.prefix_len,
            m: h.draft_len,
            recycle: config.recycle,
        }
    }

    pub fn autoregressive_from(config: &DecodeConfig) -> Self {
        RunSpec {
            autoregressive: true,
            databases: "none".into(),
            ..Self::from_config(AR_ROW, config)
        }
    }

    pub fn to_config(&self) -> Result<DecodeConfig> {
        let enabled: DbSet = if self.autoregressive { DbSet::NONE } else { self.databases.parse()? };
        let config = DecodeConfig {
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            seed: self.seed,
            hierarchy: HierarchyConfig {
                order: self.order.parse::<AccessOrder>()?,
                enabled,
                max_candidates: self.n,
                prefix_len: self.l,
                draft_len: self.m,
            },
            recycle: self.recycle,
            trace: true,
            ..Default::default()
        };
        config.validate()?;
        Ok(config)
    }

    /// Parses a JSON array of specs.
    pub fn parse_list(json: &str) -> Result<Vec<RunSpec>> {
        Ok(serde_json::from_str(json)?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean: f64,
    pub stddev: f64,
    pub per_db: PerDbLatency,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeCounts {
    pub c: u64,
    pub m: u64,
    pub s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub tokens_per_sec: f64,
    pub speedup: f64,
    pub alpha: Option<f64>,
    pub alpha_all: Option<f64>,
    pub tau: f64,
    pub steps: u64,
    pub tokens: u64,
    pub draft_latency_ns: LatencySummary,
    pub verify_latency_ns: f64,
    pub tallies: DbTallies,
    pub probes: ProbeCounts,
    /// Wall-clock nanoseconds of each timed run.
    pub run_wall_ns: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEnv {
    pub seed: u64,
    pub runs: usize,
    pub prompts: usize,
    /// Caller-provided input fingerprints (file digests, ...).
    pub fingerprints: BTreeMap<String, String>,
    pub configs: Vec<RunSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub env: BenchEnv,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, name: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Zeroes every wall-clock derived number.
    pub fn clear_timings(&mut self) {
        for r in &mut self.rows {
            r.tokens_per_sec = 0.0;
            r.speedup = 0.0;
            r.draft_latency_ns = LatencySummary::default();
            r.verify_latency_ns = 0.0;
            r.run_wall_ns.iter_mut().for_each(|w| *w = 0);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Traces of one configuration: `runs[r][p]` is run `r` on prompt `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowTraces {
    pub spec: RunSpec,
    pub runs: Vec<Vec<DecodeTrace>>,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Timed repetitions per configuration (median is reported).
    pub runs: usize,
    pub warmup: bool,
    pub fingerprints: BTreeMap<String, String>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            runs: 5,
            warmup: true,
            fingerprints: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub report: BenchReport,
    pub traces: Vec<RowTraces>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn row_from_traces(rt: &RowTraces) -> Result<BenchRow> {
    let first = rt
        .runs
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("row {} has no runs", rt.spec.name)))?;
    // Token-level metrics are identical across runs; take them from run 0.
    let metrics = aggregate_metrics(first)?;
    let all: Vec<DecodeTrace> = rt.runs.iter().flatten().cloned().collect();
    let timing = aggregate_metrics(&all)?;
    let run_wall_ns: Vec<u64> = rt
        .runs
        .iter()
        .map(|run| run.iter().map(|t| t.wall_time_ns).sum())
        .collect();
    let tps: Vec<f64> = rt
        .runs
        .iter()
        .zip(&run_wall_ns)
        .map(|(run, &wall)| {
            let tokens: usize = run.iter().map(|t| t.steps.iter().map(|s| s.kept).sum::<usize>()).sum();
            if wall == 0 { 0.0 } else { tokens as f64 / (wall as f64 * 1e-9) }
        })
        .collect();
    let t = &metrics.tallies;
    Ok(BenchRow {
        name: rt.spec.name.clone(),
        tokens_per_sec: median(&tps),
        speedup: 0.0,
        alpha: metrics.alpha,
        alpha_all: metrics.alpha_all,
        tau: metrics.tau,
        steps: metrics.steps,
        tokens: metrics.tokens_generated,
        draft_latency_ns: LatencySummary {
            mean: timing.draft_latency_ns.mean,
            stddev: timing.draft_latency_ns.stddev,
            per_db: timing.draft_latency_ns.per_db,
        },
        verify_latency_ns: timing.verify_latency_ns,
        tallies: metrics.tallies,
        probes: ProbeCounts {
            c: t.get(DbKind::Context).attempts(),
            m: t.get(DbKind::Model).attempts(),
            s: t.get(DbKind::Stats).attempts(),
        },
        run_wall_ns,
    })
}

/// Builds a report from traces; the row named [`AR_ROW`] is the speedup
/// reference.
pub fn report_from_traces(rows: &[RowTraces], options: &BenchOptions) -> Result<BenchReport> {
    let mut out: Vec<BenchRow> = rows.iter().map(row_from_traces).collect::<Result<_>>()?;
    let ar_tps = out
        .iter()
        .find(|r| r.name == AR_ROW)
        .map(|r| r.tokens_per_sec)
        .ok_or_else(|| Error::InvalidArgument("report has no autoregressive row".into()))?;
    for r in &mut out {
        r.speedup = if r.name == AR_ROW {
            1.0
        } else if ar_tps > 0.0 {
            r.tokens_per_sec / ar_tps
        } else {
            0.0
        };
    }
    let env = BenchEnv {
        seed: rows.first().map_or(0, |r| r.spec.seed),
        runs: rows.first().map_or(0, |r| r.runs.len()),
        prompts: rows.first().and_then(|r| r.runs.first()).map_or(0, Vec::len),
        fingerprints: options.fingerprints.clone(),
        configs: rows.iter().map(|r| r.spec.clone()).collect(),
    };
    Ok(BenchReport { env, rows: out })
}

fn check_resources(specs: &[RunSpec], shared: SharedDbs<'_>) -> Result<Vec<DecodeConfig>> {
    specs
        .iter()
        .map(|spec| {
            let config = spec.to_config()?;
            let enabled = config.hierarchy.enabled;
            if enabled.contains(DbKind::Model) && shared.model.is_none() {
                return Err(Error::InvalidArgument(format!("{}: model database file not provided", spec.name)));
            }
            if enabled.contains(DbKind::Stats) && shared.stats.is_none() {
                return Err(Error::InvalidArgument(format!("{}: statistics database file not provided", spec.name)));
            }
            Ok(config)
        })
        .collect()
}

fn run_once<M: TargetModel + ?Sized>(
    model: &M,
    shared: SharedDbs<'_>,
    prompts: &[Vec<TokenId>],
    spec: &RunSpec,
    config: &DecodeConfig,
) -> Result<Vec<DecodeTrace>> {
    let mut traces = Vec::with_capacity(prompts.len());
    if spec.autoregressive {
        for (i, p) in prompts.iter().enumerate() {
            let cfg = DecodeConfig {
                seed: config.seed.wrapping_add(i as u64),
                ..config.clone()
            };
            traces.push(autoregressive_decode(model, p, &cfg)?.trace.expect("trace requested"));
        }
    } else {
        let mut decoder = Decoder::new(model, shared, config.clone())?;
        for (i, p) in prompts.iter().enumerate() {
            let out = decoder.run_seeded(p, config.seed.wrapping_add(i as u64))?;
            traces.push(out.trace.expect("trace requested"));
        }
    }
    Ok(traces)
}

/// Runs every spec over all prompts, with the autoregressive baseline
/// prepended when `specs` lacks one.
pub fn run_bench<M: TargetModel + ?Sized>(
    model: &M,
    shared: SharedDbs<'_>,
    prompts: &[Vec<TokenId>],
    specs: &[RunSpec],
    options: &BenchOptions,
) -> Result<BenchOutcome> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs at least one prompt".into()));
    }
    if options.runs == 0 {
        return Err(Error::InvalidArgument("runs must be >= 1".into()));
    }
    let mut specs = specs.to_vec();
    if !specs.iter().any(|s| s.autoregressive) {
        let base = specs.first().map(RunSpec::to_config).transpose()?.unwrap_or_default();
        specs.insert(0, RunSpec::autoregressive_from(&base));
    }
    for (i, s) in specs.iter().enumerate() {
        if specs[..i].iter().any(|o| o.name == s.name) {
            return Err(Error::InvalidArgument(format!("duplicate config name {:?}", s.name)));
        }
    }
    if let Some(ar) = specs.iter_mut().find(|s| s.autoregressive) {
        ar.name = AR_ROW.into();
    }
    let configs = check_resources(&specs, shared)?;

    let mut rows = Vec::with_capacity(specs.len());
    for (spec, config) in specs.iter().zip(&configs) {
        if options.warmup {
            run_once(model, shared, prompts, spec, config)?;
        }
        let runs = (0..options.runs)
            .map(|_| run_once(model, shared, prompts, spec, config))
            .collect::<Result<Vec<_>>>()?;
        rows.push(RowTraces {
            spec: spec.clone(),
            runs,
        });
    }
    let report = report_from_traces(&rows, options)?;
    Ok(BenchOutcome { report, traces: rows })
}

/// One row per access order (all six permutations), all databases enabled.
pub fn ablate_order<M: TargetModel + ?Sized>(
    model: &M,
    shared: SharedDbs<'_>,
    prompts: &[Vec<TokenId>],
    base: &DecodeConfig,
    options: &BenchOptions,
) -> Result<BenchOutcome> {
    if base.hierarchy.enabled != DbSet::ALL {
        return Err(Error::InvalidArgument("order ablation needs all three databases enabled".into()));
    }
    let mut specs = vec![RunSpec::autoregressive_from(base)];
    for order in AccessOrder::permutations() {
        let cfg = DecodeConfig {
            hierarchy: HierarchyConfig {
                order: order.clone(),
                ..base.hierarchy.clone()
            },
            ..base.clone()
        };
        specs.push(RunSpec::from_config(format!("order={order}"), &cfg));
    }
    run_bench(model, shared, prompts, &specs, options)
}

#[derive(Debug, Clone)]
pub struct DbAblation {
    pub outcome: BenchOutcome,
    /// Present when all three single-database subsets were run.
    pub coverage: Option<CoverageReport>,
}

/// One row per database subset; the empty subset is rejected.
pub fn ablate_db_subsets<M: TargetModel + ?Sized>(
    model: &M,
    shared: SharedDbs<'_>,
    prompts: &[Vec<TokenId>],
    base: &DecodeConfig,
    subsets: &[DbSet],
    options: &BenchOptions,
) -> Result<DbAblation> {
    if subsets.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidArgument(
            "database subsets must be non-empty; the autoregressive row covers that case".into(),
        ));
    }
    let mut specs = vec![RunSpec::autoregressive_from(base)];
    for &subset in subsets {
        let cfg = DecodeConfig {
            hierarchy: HierarchyConfig {
                enabled: subset,
                ..base.hierarchy.clone()
            },
            ..base.clone()
        };
        specs.push(RunSpec::from_config(format!("dbs={subset}"), &cfg));
    }
    let outcome = run_bench(model, shared, prompts, &specs, options)?;
    let single = |db: DbKind| {
        outcome
            .traces
            .iter()
            .find(|r| r.spec.name == format!("dbs={db}"))
            .map(|r| r.runs[0].clone())
    };
    let coverage = match (single(DbKind::Context), single(DbKind::Model), single(DbKind::Stats)) {
        (Some(c), Some(m), Some(s)) => Some(coverage_report(&c, &m, &s)?),
        _ => None,
    };
    Ok(DbAblation { outcome, coverage })
}

/// All seven non-empty subsets of {c, m, s}.
pub fn ablate_dbs<M: TargetModel + ?Sized>(
    model: &M,
    shared: SharedDbs<'_>,
    prompts: &[Vec<TokenId>],
    base: &DecodeConfig,
    options: &BenchOptions,
) -> Result<DbAblation> {
    ablate_db_subsets(model, shared, prompts, base, &DbSet::non_empty_subsets(), options)
}
