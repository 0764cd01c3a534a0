//! `hd`: build databases, decode, benchmark and analyze.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hierdraft::analysis::{coverage_report, locality_stats};
use hierdraft::bench::{ablate_dbs, ablate_order, run_bench, BenchOptions, BenchOutcome, RunSpec};
use hierdraft::engine::{read_trace_bundle, write_trace_bundle};
use hierdraft::{
    autoregressive_decode, decode, load_corpus, AccessOrder, DbSet, DecodeConfig, DecodeTrace, HierarchyConfig,
    KGramModel, ModelDb, Segmentation, SharedDbs, StatsDb, TargetModel, TokenId, Vocab,
};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "hd", version, about = "Speculative decoding with hierarchical database drafting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary (one word per line) from text files.
    BuildVocab {
        #[arg(long, num_args = 1.., required = true)]
        corpus: Vec<PathBuf>,
        #[command(flatten)]
        seg: SegArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a k-gram target model and save it in binary form.
    FitModel {
        #[arg(long, num_args = 1.., required = true)]
        corpus: Vec<PathBuf>,
        /// Vocabulary to tokenize with; built from the corpus when omitted.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        seg: SegArgs,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the model database from model generations.
    BuildModelDb {
        #[arg(long, num_args = 1.., required = true)]
        generations: Vec<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        seg: SegArgs,
        #[arg(long, default_value_t = hierdraft::db::model::DEFAULT_TOP_K)]
        top_k: usize,
        #[arg(long, default_value_t = 4)]
        m: usize,
        #[arg(long, default_value_t = 7)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the suffix-array statistics database.
    BuildStatsDb {
        #[arg(long, num_args = 1.., required = true)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        seg: SegArgs,
        #[arg(long)]
        out: PathBuf,
        /// Check suffix ordering of the written file.
        #[arg(long)]
        verify: bool,
    },
    /// Decode one prompt.
    Run(RunArgs),
    /// Compare configurations against the autoregressive baseline.
    Bench(BenchArgs),
    /// Access-order or database-subset ablation.
    Ablate {
        #[arg(value_enum)]
        kind: AblateKind,
        #[command(flatten)]
        common: SuiteArgs,
        /// Write the accepted-token coverage of the single-DB runs (dbs only).
        #[arg(long)]
        coverage: Option<PathBuf>,
    },
    #[command(subcommand)]
    Analyze(Analyze),
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateKind {
    Order,
    Dbs,
}

#[derive(Subcommand)]
enum Analyze {
    /// Classify n-gram repeats as within- or across-generation.
    Locality {
        #[arg(long, num_args = 1.., required = true)]
        generations: Vec<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        seg: SegArgs,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Per-n-gram frequency summary CSV.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Venn counts of accepted tokens from c-, m- and s-only trace bundles.
    Coverage {
        /// Directory holding c.jsonl, m.jsonl, s.jsonl (or dbs=c.jsonl, ...).
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone, Copy)]
struct SegArgs {
    /// Treat every non-blank line as a document instead of every file.
    #[arg(long)]
    doc_per_line: bool,
}

impl SegArgs {
    fn get(self) -> Segmentation {
        if self.doc_per_line {
            Segmentation::LinePerDoc
        } else {
            Segmentation::FilePerDoc
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Saved k-gram model (see `fit-model`).
    #[arg(long, conflicts_with = "fit_corpus")]
    model: Option<PathBuf>,
    /// Fit the k-gram model on these files instead of loading one.
    #[arg(long, num_args = 1..)]
    fit_corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[command(flatten)]
    seg: SegArgs,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Busy-wait per model call, in milliseconds.
    #[arg(long, default_value_t = 0.0)]
    call_cost_ms: f64,
    #[arg(long)]
    stats_db: Option<PathBuf>,
    #[arg(long)]
    model_db: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, conflicts_with = "prompt_file", required_unless_present = "prompt_file")]
    prompt: Option<String>,
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "cms")]
    order: String,
    /// Enabled databases, e.g. "c,m,s", "c,s" or "none".
    #[arg(long, default_value = "c,m,s")]
    databases: String,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1024)]
    max_tokens: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 7)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    l: usize,
    #[arg(long, default_value_t = 4)]
    m: usize,
    #[arg(long)]
    no_recycle: bool,
    /// Decode without drafting, one model call per token.
    #[arg(long)]
    autoregressive: bool,
    /// Write the per-step trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Print text, tokens and metrics as one JSON object.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SuiteArgs {
    /// One prompt per line.
    #[arg(long)]
    prompts: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long)]
    no_warmup: bool,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1024)]
    max_tokens: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Write the first timed run of every row as `<dir>/<row>.jsonl`.
    #[arg(long)]
    traces: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON array of run configurations.
    #[arg(long)]
    configs: PathBuf,
    #[command(flatten)]
    common: SuiteArgs,
}

fn main() {
    if let Err(e) = real_main() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn real_main() -> Result<()> {
    match Cli::parse().command {
        Command::BuildVocab { corpus, seg, out } => {
            let texts = hierdraft::corpus::read_documents(&corpus, seg.get())?;
            let vocab = Vocab::build(&texts)?;
            vocab.save(&out)?;
            eprintln!("vocab: {} ids ({} words) -> {}", vocab.size(), vocab.size() - 3, out.display());
        }
        Command::FitModel {
            corpus,
            vocab,
            seg,
            k,
            alpha,
            out,
        } => {
            let (corpus, built) = corpus_with_vocab(&corpus, seg.get(), vocab.as_deref())?;
            let model = KGramModel::fit(&corpus, k, alpha)?;
            model.save(&out)?;
            if built {
                save_sidecar_vocab(&corpus.vocab, &out)?;
            }
            eprintln!("model: k={k} over {} tokens -> {}", corpus.token_count(), out.display());
        }
        Command::BuildModelDb {
            generations,
            vocab,
            seg,
            top_k,
            m,
            n,
            out,
        } => {
            let (corpus, built) = corpus_with_vocab(&generations, seg.get(), vocab.as_deref())?;
            let db = ModelDb::build(&corpus, top_k, m, n)?;
            db.save(&out)?;
            if built {
                save_sidecar_vocab(&corpus.vocab, &out)?;
            }
            eprintln!("model db: {} keys, {} sequences -> {}", db.key_count(), db.sequence_count(), out.display());
        }
        Command::BuildStatsDb {
            corpus,
            vocab,
            seg,
            out,
            verify,
        } => {
            let (corpus, built) = corpus_with_vocab(&corpus, seg.get(), vocab.as_deref())?;
            let db = StatsDb::build(&corpus)?;
            db.save(&out)?;
            if built {
                save_sidecar_vocab(&corpus.vocab, &out)?;
            }
            if verify {
                StatsDb::load_verified(&out)?;
            }
            eprintln!("stats db: {} tokens -> {}", db.len(), out.display());
        }
        Command::Run(args) => run(args)?,
        Command::Bench(args) => bench(args)?,
        Command::Ablate { kind, common, coverage } => ablate(kind, common, coverage)?,
        Command::Analyze(Analyze::Locality {
            generations,
            vocab,
            seg,
            n,
            out,
            summary,
        }) => {
            let (corpus, _) = corpus_with_vocab(&generations, seg.get(), vocab.as_deref())?;
            let stats = locality_stats(&corpus, n)?;
            write(&out, stats.to_csv())?;
            if let Some(path) = summary {
                write(&path, stats.summary_csv())?;
            }
            let counts = stats.class_counts();
            let get = |c| counts.get(&c).copied().unwrap_or(0);
            use hierdraft::analysis::OccurrenceClass as C;
            eprintln!(
                "{}-grams: {} first, {} within, {} across",
                n,
                get(C::First),
                get(C::WithinProcess),
                get(C::AcrossProcess)
            );
        }
        Command::Analyze(Analyze::Coverage { traces, out }) => {
            let load = |db: &str| -> Result<Vec<DecodeTrace>> {
                for name in [format!("{db}.jsonl"), format!("dbs={db}.jsonl")] {
                    let p = traces.join(&name);
                    if p.exists() {
                        return Ok(read_trace_bundle(&read(&p)?)?);
                    }
                }
                bail!("{}: no {db}.jsonl trace bundle", traces.display())
            };
            let report = coverage_report(&load("c")?, &load("m")?, &load("s")?)?;
            write(&out, serde_json::to_string_pretty(&report)?)?;
        }
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn corpus_with_vocab(
    paths: &[PathBuf],
    seg: Segmentation,
    vocab: Option<&Path>,
) -> Result<(hierdraft::Corpus, bool)> {
    let vocab = vocab.map(Vocab::load).transpose()?;
    let built = vocab.is_none();
    Ok((load_corpus(paths, seg, vocab)?, built))
}

/// Databases and models only store ids, so a freshly built vocab is written
/// next to the output.
fn save_sidecar_vocab(vocab: &Vocab, out: &Path) -> Result<()> {
    let mut name = out.as_os_str().to_owned();
    name.push(".vocab");
    let path = PathBuf::from(name);
    vocab.save(&path)?;
    eprintln!("vocab: {} ids -> {}", vocab.size(), path.display());
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

struct Loaded {
    vocab: Vocab,
    model: KGramModel,
    model_db: Option<ModelDb>,
    stats_db: Option<StatsDb>,
    fingerprints: BTreeMap<String, String>,
}

impl Loaded {
    fn shared(&self) -> SharedDbs<'_> {
        SharedDbs {
            model: self.model_db.as_ref(),
            stats: self.stats_db.as_ref(),
        }
    }
}

fn load_model(args: &ModelArgs) -> Result<Loaded> {
    let mut fingerprints = BTreeMap::new();
    let (model, vocab) = match (&args.model, args.fit_corpus.is_empty()) {
        (Some(path), _) => {
            let vocab_path = args.vocab.as_ref().context("--model needs --vocab")?;
            fingerprints.insert("model".into(), sha256_file(path)?);
            fingerprints.insert("vocab".into(), sha256_file(vocab_path)?);
            (KGramModel::load(path)?, Vocab::load(vocab_path)?)
        }
        (None, false) => {
            for (i, p) in args.fit_corpus.iter().enumerate() {
                fingerprints.insert(format!("fit_corpus[{i}]"), sha256_file(p)?);
            }
            if let Some(v) = &args.vocab {
                fingerprints.insert("vocab".into(), sha256_file(v)?);
            }
            let (corpus, _) = corpus_with_vocab(&args.fit_corpus, args.seg.get(), args.vocab.as_deref())?;
            (KGramModel::fit(&corpus, args.k, args.alpha)?, corpus.vocab)
        }
        (None, true) => bail!("give either --model or --fit-corpus"),
    };
    ensure!(
        model.vocab_size() == vocab.size(),
        "model covers {} ids but the vocab has {}",
        model.vocab_size(),
        vocab.size()
    );
    let model = if args.call_cost_ms > 0.0 {
        model.with_call_cost(Duration::from_secs_f64(args.call_cost_ms / 1000.0))
    } else {
        model
    };
    let model_db = match &args.model_db {
        Some(p) => {
            fingerprints.insert("model_db".into(), sha256_file(p)?);
            let db = ModelDb::load(p)?;
            ensure!(db_fits_vocab(&db, vocab.size()), "model db uses ids beyond the vocab");
            Some(db)
        }
        None => None,
    };
    let stats_db = match &args.stats_db {
        Some(p) => {
            fingerprints.insert("stats_db".into(), sha256_file(p)?);
            let db = StatsDb::load(p)?;
            ensure!(
                db.vocab_size() <= vocab.size(),
                "stats db was built over {} ids but the vocab has {}",
                db.vocab_size(),
                vocab.size()
            );
            Some(db)
        }
        None => None,
    };
    Ok(Loaded {
        vocab,
        model,
        model_db,
        stats_db,
        fingerprints,
    })
}

/// Every key and value id is below `vocab_size`.
fn db_fits_vocab(db: &ModelDb, vocab_size: usize) -> bool {
    let keys = db.key_count();
    let mut seen = 0;
    for k in 0..vocab_size as TokenId {
        let e = db.entries(k);
        if e.is_empty() {
            continue;
        }
        seen += 1;
        if e.iter().any(|(s, _)| s.iter().any(|&t| t as usize >= vocab_size)) {
            return false;
        }
    }
    seen == keys
}

fn tokenize_prompt(vocab: &Vocab, text: &str) -> Result<Vec<TokenId>> {
    let toks = vocab.tokenize(text);
    ensure!(!toks.is_empty(), "empty prompt");
    Ok(toks)
}

fn hierarchy(order: &str, databases: &str, n: usize, l: usize, m: usize) -> Result<HierarchyConfig> {
    Ok(HierarchyConfig {
        order: order.parse::<AccessOrder>()?,
        enabled: databases.parse::<DbSet>()?,
        max_candidates: n,
        prefix_len: l,
        draft_len: m,
    })
}

fn run(args: RunArgs) -> Result<()> {
    let loaded = load_model(&args.model)?;
    let text = match (&args.prompt, &args.prompt_file) {
        (Some(p), _) => p.clone(),
        (None, Some(path)) => read(path)?,
        (None, None) => unreachable!("clap requires one of them"),
    };
    let prompt = tokenize_prompt(&loaded.vocab, &text)?;
    let config = DecodeConfig {
        max_tokens: args.max_tokens,
        temperature: args.temperature,
        seed: args.seed,
        hierarchy: hierarchy(&args.order, &args.databases, args.n, args.l, args.m)?,
        recycle: !args.no_recycle,
        trace: args.trace.is_some(),
        ..Default::default()
    };
    let out = if args.autoregressive {
        autoregressive_decode(&loaded.model, &prompt, &config)?
    } else {
        decode(&loaded.model, &prompt, loaded.shared(), &config)?
    };
    if let (Some(path), Some(trace)) = (&args.trace, &out.trace) {
        write(path, trace.to_jsonl()?)?;
    }
    let text = loaded.vocab.detokenize(&out.tokens)?;
    if args.json {
        let obj = serde_json::json!({
            "text": text,
            "tokens": out.tokens,
            "metrics": out.metrics,
        });
        println!("{}", serde_json::to_string(&obj)?);
    } else {
        println!("{text}");
        let m = &out.metrics;
        eprintln!(
            "steps {} tokens {} tau {:.3} alpha {} wall {:.3}s",
            m.steps,
            m.tokens_generated,
            m.tau,
            m.alpha.map_or("-".into(), |a| format!("{a:.4}")),
            m.wall_time_ns as f64 * 1e-9
        );
    }
    Ok(())
}

fn read_prompts(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<TokenId>>> {
    let prompts: Vec<Vec<TokenId>> = read(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| tokenize_prompt(vocab, l))
        .collect::<Result<_>>()?;
    ensure!(!prompts.is_empty(), "{}: no prompts", path.display());
    Ok(prompts)
}

struct Suite {
    loaded: Loaded,
    prompts: Vec<Vec<TokenId>>,
    options: BenchOptions,
    base: DecodeConfig,
}

fn suite(args: &SuiteArgs) -> Result<Suite> {
    let mut loaded = load_model(&args.model)?;
    let prompts = read_prompts(&args.prompts, &loaded.vocab)?;
    loaded.fingerprints.insert("prompts".into(), sha256_file(&args.prompts)?);
    let options = BenchOptions {
        runs: args.runs,
        warmup: !args.no_warmup,
        fingerprints: loaded.fingerprints.clone(),
    };
    let base = DecodeConfig {
        max_tokens: args.max_tokens,
        temperature: args.temperature,
        seed: args.seed,
        trace: true,
        ..Default::default()
    };
    Ok(Suite {
        loaded,
        prompts,
        options,
        base,
    })
}

fn finish(outcome: &BenchOutcome, args: &SuiteArgs) -> Result<()> {
    write(&args.out, outcome.report.to_json()?)?;
    if let Some(dir) = &args.traces {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for row in &outcome.traces {
            write(&dir.join(format!("{}.jsonl", row.spec.name)), write_trace_bundle(&row.runs[0])?)?;
        }
    }
    for r in &outcome.report.rows {
        eprintln!(
            "{:<14} {:>10.1} tok/s  speedup {:>5.2}  tau {:>5.2}  alpha {}",
            r.name,
            r.tokens_per_sec,
            r.speedup,
            r.tau,
            r.alpha.map_or("-".into(), |a| format!("{a:.4}"))
        );
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let s = suite(&args.common)?;
    let specs = RunSpec::parse_list(&read(&args.configs)?)?;
    ensure!(!specs.is_empty(), "{}: no configurations", args.configs.display());
    let mut options = s.options.clone();
    options.fingerprints.insert("configs".into(), sha256_file(&args.configs)?);
    let outcome = run_bench(&s.loaded.model, s.loaded.shared(), &s.prompts, &specs, &options)?;
    finish(&outcome, &args.common)
}

fn ablate(kind: AblateKind, args: SuiteArgs, coverage: Option<PathBuf>) -> Result<()> {
    let s = suite(&args)?;
    let shared = s.loaded.shared();
    match kind {
        AblateKind::Order => {
            ensure!(coverage.is_none(), "--coverage only applies to `ablate dbs`");
            let outcome = ablate_order(&s.loaded.model, shared, &s.prompts, &s.base, &s.options)?;
            finish(&outcome, &args)
        }
        AblateKind::Dbs => {
            let result = ablate_dbs(&s.loaded.model, shared, &s.prompts, &s.base, &s.options)?;
            finish(&result.outcome, &args)?;
            if let (Some(path), Some(report)) = (coverage, &result.coverage) {
                write(&path, serde_json::to_string_pretty(report)?)?;
            }
            Ok(())
        }
    }
}
