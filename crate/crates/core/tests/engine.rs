mod common;

use std::time::Duration;

use common::{repeated_passage, tiny_model};
use hierdraft::analysis::{coverage_report, locality_stats};
use hierdraft::bench::{ablate_dbs, ablate_order, report_from_traces, run_bench, BenchOptions, RunSpec, AR_ROW};
use hierdraft::engine::{no_drafting, read_trace_bundle, write_trace_bundle};
use hierdraft::{
    aggregate_metrics, autoregressive_decode, decode, Corpus, DbKind, DbSet, DecodeConfig, DecodeMetrics, Decoder, Error,
    HierarchyConfig, KGramModel, SharedDbs, StatsDb, TokenId, Vocab, EOS,
};

fn traced(max_tokens: usize) -> DecodeConfig {
    DecodeConfig {
        max_tokens,
        trace: true,
        ..Default::default()
    }
}

fn only(dbs: &str, max_tokens: usize) -> DecodeConfig {
    DecodeConfig {
        hierarchy: HierarchyConfig {
            enabled: dbs.parse().unwrap(),
            ..Default::default()
        },
        ..traced(max_tokens)
    }
}

fn fixture_shared(f: &common::Fixture) -> SharedDbs<'_> {
    SharedDbs {
        model: None,
        stats: Some(&f.stats_db),
    }
}

#[test]
fn disabled_drafting_matches_autoregressive() {
    let f = repeated_passage(12);
    let cfg = DecodeConfig {
        hierarchy: no_drafting(&HierarchyConfig::default()),
        ..traced(30)
    };
    let hd = decode(&f.model, &f.prompt, SharedDbs::default(), &cfg).unwrap();
    let ar = autoregressive_decode(&f.model, &f.prompt, &cfg).unwrap();
    assert_eq!(hd.tokens, ar.tokens);
    assert_eq!(hd.metrics.steps, 30);
    assert_eq!(hd.metrics.tau, 1.0);
    assert_eq!(hd.metrics.alpha, None);
    assert_eq!(ar.metrics.alpha, None);
}

#[test]
fn single_token_budget() {
    let f = repeated_passage(12);
    let out = decode(&f.model, &f.prompt, fixture_shared(&f), &only("c,s", 1)).unwrap();
    assert_eq!(out.tokens, vec![f.prompt[0]]);
    assert_eq!(out.metrics.steps, 1);
    assert_eq!(out.metrics.tokens_generated, 1);
    // the draft was fully accepted but only one token fits the budget
    assert_eq!(out.trace.unwrap().steps[0].kept, 1);
}

#[test]
fn fixture_steps_are_budget_over_five() {
    let f = repeated_passage(20);
    for t in [5, 50, 100] {
        let out = decode(&f.model, &f.prompt, fixture_shared(&f), &only("c", t)).unwrap();
        assert_eq!(out.tokens.len(), t);
        assert_eq!(out.metrics.steps as usize, t / 5);
        assert_eq!(out.metrics.tau, 5.0);
        assert_eq!(out.metrics.alpha, Some(1.0));
        // the generated text keeps cycling through the passage
        let want: Vec<TokenId> = f.prompt.iter().cycle().take(t).copied().collect();
        assert_eq!(out.tokens, want);
    }
}

#[test]
fn eos_stops_generation() {
    // a model fit on the bare passage ends it with EOS
    let p = common::passage(6);
    let vocab = Vocab::build(&[&p]).unwrap();
    let corpus = Corpus::from_texts(&[&p], vocab.clone());
    let model = KGramModel::fit(&corpus, 3, 0.01).unwrap();
    let prompt = vocab.tokenize("p0 p1");
    let out = decode(&model, &prompt, SharedDbs::default(), &only("c", 100)).unwrap();
    assert_eq!(out.tokens, vocab.tokenize("p2 p3 p4 p5").into_iter().chain([EOS]).collect::<Vec<_>>());
    assert!(out.tokens.len() < 100);
}

#[test]
fn session_reuse_does_not_leak_state() {
    let f = repeated_passage(15);
    let other = f.vocab.tokenize("p3 p9 p1 p2");
    let mut dec = Decoder::new(&f.model, fixture_shared(&f), only("c,s", 40)).unwrap();
    let first = dec.run(&f.prompt).unwrap();
    dec.run(&other).unwrap();
    let again = dec.run(&f.prompt).unwrap();
    let fresh = decode(&f.model, &f.prompt, fixture_shared(&f), &only("c,s", 40)).unwrap();
    let strip = |o: hierdraft::DecodeOutput| {
        let mut t = o.trace.unwrap();
        t.clear_timings();
        (o.tokens, t)
    };
    assert_eq!(strip(first.clone()), strip(again));
    assert_eq!(strip(first), strip(fresh));
}

#[test]
fn prompt_errors() {
    let f = repeated_passage(5);
    let cfg = only("c", 5);
    let run = |p: &[TokenId]| decode(&f.model, p, SharedDbs::default(), &cfg);
    assert!(matches!(run(&[]), Err(Error::MalformedPrompt(_))));
    assert!(matches!(run(&[f.prompt[0], EOS, f.prompt[1]]), Err(Error::MalformedPrompt(_))));
    assert!(matches!(run(&[f.prompt[0], 999]), Err(Error::UnknownTokenId(999))));
    // enabled DBs must be supplied
    assert!(decode(&f.model, &f.prompt, SharedDbs::default(), &only("s", 5)).is_err());
    assert!(decode(&f.model, &f.prompt, SharedDbs::default(), &only("m", 5)).is_err());
    let bad = DecodeConfig {
        temperature: -1.0,
        ..cfg.clone()
    };
    assert!(decode(&f.model, &f.prompt, SharedDbs::default(), &bad).is_err());
}

#[test]
fn trace_replay_reproduces_metrics() {
    let (model, corpus, prompt) = tiny_model();
    let stats = StatsDb::build(&corpus).unwrap();
    let cfg = DecodeConfig {
        temperature: 0.9,
        ..only("c,s", 60)
    };
    let shared = SharedDbs {
        model: None,
        stats: Some(&stats),
    };
    let out = decode(&model, &prompt, shared, &cfg).unwrap();
    let trace = out.trace.clone().unwrap();
    assert_eq!(trace.output(), out.tokens);
    let text = trace.to_jsonl().unwrap();
    let back = hierdraft::DecodeTrace::from_jsonl(&text).unwrap();
    assert_eq!(back, trace);
    assert_eq!(DecodeMetrics::from_trace(&back).unwrap(), out.metrics);
    // a truncated trace is rejected
    let cut: String = text.lines().take(3).collect::<Vec<_>>().join("\n");
    assert!(hierdraft::DecodeTrace::from_jsonl(&cut).is_err());
}

#[test]
fn aggregation_of_identical_traces() {
    let f = repeated_passage(10);
    let out = decode(&f.model, &f.prompt, fixture_shared(&f), &only("c,s", 37)).unwrap();
    let t = out.trace.unwrap();
    let one = aggregate_metrics(std::slice::from_ref(&t)).unwrap();
    assert_eq!(one, out.metrics);
    let two = aggregate_metrics(&[t.clone(), t.clone()]).unwrap();
    assert_eq!(two.steps, 2 * one.steps);
    assert_eq!(two.tokens_generated, 2 * one.tokens_generated);
    assert_eq!(two.tau, one.tau);
    assert_eq!(two.alpha, one.alpha);
    assert!((two.draft_latency_ns.mean - one.draft_latency_ns.mean).abs() < 1e-6);
    assert!(aggregate_metrics(&[]).is_err());
}

#[test]
fn tallies_follow_the_access_log() {
    let f = repeated_passage(20);
    let out = decode(&f.model, &f.prompt, fixture_shared(&f), &only("c,s", 50)).unwrap();
    let trace = out.trace.unwrap();
    let tal = out.metrics.tallies;
    let mut c_success = 0;
    let mut s_attempts = 0;
    for s in &trace.steps {
        let c = s.access.get(DbKind::Context).unwrap();
        c_success += u64::from(c.attempted && c.returned > 0);
        s_attempts += u64::from(s.access.attempted(DbKind::Stats));
    }
    assert_eq!(tal.context.draft_success, c_success);
    assert_eq!(tal.stats.attempts(), s_attempts);
    assert_eq!(tal.model.attempts(), 0);
    // every step is won by a context draft
    assert_eq!(tal.context.verify_success, trace.steps.len() as u64);
}

#[test]
fn trace_bundle_round_trip() {
    let f = repeated_passage(10);
    let prompts = [f.prompt.clone(), f.vocab.tokenize("p4 p5"), f.vocab.tokenize("p9")];
    let traces: Vec<_> = prompts
        .iter()
        .map(|p| decode(&f.model, p, fixture_shared(&f), &only("c,s", 12)).unwrap().trace.unwrap())
        .collect();
    let text = write_trace_bundle(&traces).unwrap();
    assert_eq!(read_trace_bundle(&text).unwrap(), traces);
}

#[test]
fn bench_report_recomputes_from_traces() {
    let f = repeated_passage(20);
    let prompts = vec![f.prompt.clone(), f.vocab.tokenize("p0 p1 p2")];
    let specs = [
        RunSpec::from_config("c-only", &only("c", 30)),
        RunSpec::from_config("c,s", &only("c,s", 30)),
    ];
    let opts = BenchOptions {
        runs: 3,
        warmup: false,
        ..Default::default()
    };
    let out = run_bench(&f.model, fixture_shared(&f), &prompts, &specs, &opts).unwrap();
    assert_eq!(out.report.rows.len(), 3);
    assert_eq!(out.report.rows[0].name, AR_ROW);
    assert_eq!(out.report.row(AR_ROW).unwrap().speedup, 1.0);
    assert_eq!(out.report.env.runs, 3);
    let again = report_from_traces(&out.traces, &opts).unwrap();
    assert_eq!(again.to_json().unwrap(), out.report.to_json().unwrap());
    let json: serde_json::Value = serde_json::from_str(&out.report.to_json().unwrap()).unwrap();
    for key in ["name", "tokens_per_sec", "speedup", "alpha", "tau", "draft_latency_ns", "tallies"] {
        assert!(json["rows"][1].get(key).is_some(), "missing {key}");
    }
    assert!(json["rows"][1]["draft_latency_ns"]["per_db"].get("s").is_some());
}

#[test]
fn bench_rejects_missing_resources_before_running() {
    let mut f = repeated_passage(10);
    // would take seconds if any run started
    f.model = f.model.with_call_cost(Duration::from_millis(50));
    let specs = [RunSpec::from_config("needs-m", &only("c,m", 30))];
    let err = run_bench(&f.model, fixture_shared(&f), &[f.prompt.clone()], &specs, &BenchOptions::default());
    assert!(err.is_err());
    let dup = [
        RunSpec::from_config("x", &only("c", 5)),
        RunSpec::from_config("x", &only("c", 5)),
    ];
    assert!(run_bench(&f.model, fixture_shared(&f), &[f.prompt.clone()], &dup, &BenchOptions::default()).is_err());
}

#[test]
fn ablations() {
    let f = repeated_passage(12);
    let gens = Corpus::from_texts(&[common::passage(12)], f.vocab.clone());
    let mdb = hierdraft::ModelDb::build(&gens, 100, 4, 7).unwrap();
    let shared = SharedDbs {
        model: Some(&mdb),
        stats: Some(&f.stats_db),
    };
    let opts = BenchOptions {
        runs: 1,
        warmup: false,
        ..Default::default()
    };
    let prompts = [f.prompt.clone()];
    let orders = ablate_order(&f.model, shared, &prompts, &traced(20), &opts).unwrap();
    assert_eq!(orders.report.rows.len(), 7);
    // s is probed on every step when it comes first
    for row in &orders.report.rows[1..] {
        if row.name.starts_with("order=s") {
            assert_eq!(row.probes.s, row.steps, "{}", row.name);
        }
    }
    assert!(ablate_order(&f.model, shared, &prompts, &only("c,s", 20), &opts).is_err());

    let dbs = ablate_dbs(&f.model, shared, &prompts, &traced(20), &opts).unwrap();
    assert_eq!(dbs.outcome.report.rows.len(), 8);
    let cov = dbs.coverage.unwrap();
    assert_eq!(cov.regions.values().sum::<usize>(), cov.union);
    let empty = hierdraft::bench::ablate_db_subsets(&f.model, shared, &prompts, &traced(20), &[DbSet::NONE], &opts);
    assert!(empty.is_err());
}

#[test]
fn coverage_regions() {
    let f = repeated_passage(12);
    let t = |dbs: &str| vec![decode(&f.model, &f.prompt, fixture_shared(&f), &only(dbs, 20)).unwrap().trace.unwrap()];
    let c = t("c");
    // identical traces put everything in the triple intersection
    let same = coverage_report(&c, &c, &c).unwrap();
    assert_eq!(same.regions["c&m&s"], same.union);
    assert_eq!(same.union, 16);
    // a run with no drafts leaves the c events exclusive
    let none = vec![autoregressive_decode(&f.model, &f.prompt, &traced(20)).unwrap().trace.unwrap()];
    let excl = coverage_report(&c, &none, &none).unwrap();
    assert_eq!(excl.regions["c"], 16);
    assert_eq!(excl.totals["m"], 0);
    let other = vec![decode(&f.model, &f.vocab.tokenize("p1"), fixture_shared(&f), &only("c", 20)).unwrap().trace.unwrap()];
    assert!(coverage_report(&c, &other, &c).is_err());
}

/// Recount the Venn regions from per-DB event sets.
#[test]
fn coverage_matches_set_algebra() {
    use std::collections::BTreeSet;
    let (model, corpus, _) = tiny_model();
    let stats = StatsDb::build(&corpus).unwrap();
    let gens = Corpus {
        docs: corpus.docs[..10].to_vec(),
        vocab: corpus.vocab.clone(),
    };
    let mdb = hierdraft::ModelDb::build(&gens, 50, 4, 7).unwrap();
    let shared = SharedDbs {
        model: Some(&mdb),
        stats: Some(&stats),
    };
    let prompts: Vec<Vec<TokenId>> = corpus.docs[20..30].iter().map(|d| d[..5].to_vec()).collect();
    let run = |dbs: &str| -> Vec<_> {
        prompts
            .iter()
            .map(|p| decode(&model, p, shared, &only(dbs, 40)).unwrap().trace.unwrap())
            .collect()
    };
    let (c, m, s) = (run("c"), run("m"), run("s"));
    let report = coverage_report(&c, &m, &s).unwrap();
    let events = |ts: &[hierdraft::DecodeTrace]| -> BTreeSet<_> {
        ts.iter()
            .enumerate()
            .flat_map(|(i, t)| hierdraft::analysis::accepted_events(t, i))
            .collect()
    };
    let (ec, em, es) = (events(&c), events(&m), events(&s));
    let all: BTreeSet<_> = ec.union(&em).chain(&es).cloned().collect();
    assert_eq!(report.union, all.len());
    let only_c = ec.iter().filter(|e| !em.contains(e) && !es.contains(e)).count();
    let triple = ec.iter().filter(|e| em.contains(e) && es.contains(e)).count();
    let m_s = em.iter().filter(|e| es.contains(e) && !ec.contains(e)).count();
    assert_eq!(report.regions["c"], only_c);
    assert_eq!(report.regions["c&m&s"], triple);
    assert_eq!(report.regions["m&s"], m_s);
    assert_eq!(report.totals["s"], es.len());
    assert!(report.union > 0);
}

#[test]
fn locality_on_generations() {
    let f = repeated_passage(8);
    let gens: Vec<Vec<TokenId>> = (0..3)
        .map(|_| decode(&f.model, &f.prompt, fixture_shared(&f), &only("c", 24)).unwrap().tokens)
        .collect();
    let corpus = Corpus {
        docs: gens,
        vocab: f.vocab.clone(),
    };
    let stats = locality_stats(&corpus, 4).unwrap();
    let counts = stats.class_counts();
    // 8 distinct 4-grams in a cycle of 8; 21 windows per doc, 13 of them repeats
    assert_eq!(counts[&hierdraft::analysis::OccurrenceClass::First], 8);
    assert_eq!(counts[&hierdraft::analysis::OccurrenceClass::WithinProcess], 39);
    assert_eq!(counts[&hierdraft::analysis::OccurrenceClass::AcrossProcess], 16);
}

#[test]
fn autoregressive_matches_argmax_oracle() {
    let (model, _, prompt) = tiny_model();
    let out = autoregressive_decode(&model, &prompt, &traced(30)).unwrap();
    let mut ctx = prompt.clone();
    let mut want = Vec::new();
    while want.len() < 30 {
        let p = hierdraft::TargetModel::next_distribution(&model, &ctx).probs;
        // first index of the maximum
        let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b }) as TokenId;
        want.push(best);
        ctx.push(best);
        if best == EOS {
            break;
        }
    }
    assert_eq!(out.tokens, want);
    assert_eq!(out.metrics.steps as usize, want.len());
    let one = autoregressive_decode(&model, &prompt, &traced(1)).unwrap();
    assert_eq!(one.tokens.len(), 1);
    assert_eq!(one.metrics.steps, 1);
}

#[test]
fn drafting_never_takes_more_steps() {
    let (model, corpus, _) = tiny_model();
    let stats = StatsDb::build(&corpus).unwrap();
    let shared = SharedDbs {
        model: None,
        stats: Some(&stats),
    };
    for doc in corpus.docs.iter().take(20) {
        let prompt = &doc[..6];
        let hd = decode(&model, prompt, shared, &only("c,s", 40)).unwrap();
        let ar = autoregressive_decode(&model, prompt, &traced(40)).unwrap();
        assert_eq!(hd.tokens, ar.tokens);
        assert!(hd.metrics.steps <= ar.metrics.steps);
        assert_eq!(hd.metrics.steps == ar.metrics.steps, hd.metrics.accepted_tokens == 0);
    }
}

#[test]
fn aggregate_equals_flat_recompute() {
    let f = repeated_passage(10);
    let a = decode(&f.model, &f.prompt, fixture_shared(&f), &only("c,s", 23)).unwrap().trace.unwrap();
    let b = decode(&f.model, &f.vocab.tokenize("p7 p2"), fixture_shared(&f), &only("c,s", 9))
        .unwrap()
        .trace
        .unwrap();
    let flat = hierdraft::DecodeTrace {
        prompt: Vec::new(),
        steps: a.steps.iter().chain(&b.steps).cloned().collect(),
        wall_time_ns: a.wall_time_ns + b.wall_time_ns,
    };
    assert_eq!(aggregate_metrics(&[a, b]).unwrap(), DecodeMetrics::from_trace(&flat).unwrap());
}
