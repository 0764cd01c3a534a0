//! Offline analyses: n-gram temporal locality across generations and the
//! overlap of tokens accepted under different databases.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenId};
use crate::draft::DbKind;
use crate::engine::DecodeTrace;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccurrenceClass {
    First,
    /// Seen earlier in the same document.
    WithinProcess,
    /// Seen before, but only in other documents.
    AcrossProcess,
}

impl OccurrenceClass {
    pub fn as_str(self) -> &'static str {
        match self {
            OccurrenceClass::First => "first",
            OccurrenceClass::WithinProcess => "within",
            OccurrenceClass::AcrossProcess => "across",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occurrence {
    pub ngram_id: usize,
    pub doc_index: usize,
    pub position: usize,
    pub class: OccurrenceClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramSummary {
    pub ngram_id: usize,
    pub tokens: Vec<TokenId>,
    pub occurrences: usize,
    pub docs: usize,
    pub within: usize,
    pub across: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalityStats {
    pub n: usize,
    pub occurrences: Vec<Occurrence>,
    /// Indexed by n-gram id (first-occurrence order).
    pub ngrams: Vec<NgramSummary>,
}

impl LocalityStats {
    pub fn class_counts(&self) -> HashMap<OccurrenceClass, usize> {
        let mut out = HashMap::new();
        for o in &self.occurrences {
            *out.entry(o.class).or_insert(0) += 1;
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("ngram_id,doc_index,position,class\n");
        for o in &self.occurrences {
            let _ = writeln!(s, "{},{},{},{}", o.ngram_id, o.doc_index, o.position, o.class.as_str());
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("ngram_id,ngram,occurrences,docs,within,across\n");
        for g in &self.ngrams {
            let tokens: Vec<String> = g.tokens.iter().map(u32::to_string).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                g.ngram_id,
                tokens.join(" "),
                g.occurrences,
                g.docs,
                g.within,
                g.across
            );
        }
        s
    }
}

/// Classifies every n-gram occurrence in `generations`, processed in
/// document order, by where its previous occurrence was.
pub fn locality_stats(generations: &Corpus, n: usize) -> Result<LocalityStats> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    if generations.docs.len() < 2 {
        return Err(Error::InvalidArgument("locality analysis needs at least 2 documents".into()));
    }
    // n-gram -> (id, last document it was seen in)
    let mut seen: HashMap<&[TokenId], (usize, usize)> = HashMap::new();
    let mut ngrams: Vec<NgramSummary> = Vec::new();
    let mut occurrences = Vec::new();
    for (d, doc) in generations.docs.iter().enumerate() {
        for (pos, gram) in doc.windows(n).enumerate() {
            let (id, class) = match seen.get_mut(gram) {
                None => {
                    let id = ngrams.len();
                    seen.insert(gram, (id, d));
                    ngrams.push(NgramSummary {
                        ngram_id: id,
                        tokens: gram.to_vec(),
                        occurrences: 0,
                        docs: 1,
                        within: 0,
                        across: 0,
                    });
                    (id, OccurrenceClass::First)
                }
                Some((id, last_doc)) if *last_doc == d => (*id, OccurrenceClass::WithinProcess),
                Some((id, last_doc)) => {
                    *last_doc = d;
                    ngrams[*id].docs += 1;
                    (*id, OccurrenceClass::AcrossProcess)
                }
            };
            let g = &mut ngrams[id];
            g.occurrences += 1;
            match class {
                OccurrenceClass::WithinProcess => g.within += 1,
                OccurrenceClass::AcrossProcess => g.across += 1,
                OccurrenceClass::First => {}
            }
            occurrences.push(Occurrence {
                ngram_id: id,
                doc_index: d,
                position: pos,
                class,
            });
        }
    }
    Ok(LocalityStats {
        n,
        occurrences,
        ngrams,
    })
}

/// An accepted draft token: (prompt index, output position, token).
pub type AcceptedEvent = (usize, usize, TokenId);

/// Draft tokens accepted during a decode, keyed by their output position.
pub fn accepted_events(trace: &DecodeTrace, prompt_index: usize) -> Vec<AcceptedEvent> {
    let mut out = Vec::new();
    let mut offset = 0;
    for step in &trace.steps {
        let accepted = step.outcome.accepted().min(step.kept);
        for (j, &t) in step.outcome.emitted[..accepted].iter().enumerate() {
            out.push((prompt_index, offset + j, t));
        }
        offset += step.kept;
    }
    out
}

/// Sizes of the seven Venn regions of accepted-token events.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Region name ("c", "c&m", "c&m&s", ...) -> event count.
    pub regions: BTreeMap<String, usize>,
    /// Events per database, overlaps included.
    pub totals: BTreeMap<String, usize>,
    pub union: usize,
}

fn region_name(mask: u8) -> String {
    DbKind::ALL
        .iter()
        .filter(|d| mask & (1 << d.index()) != 0)
        .map(|d| d.letter().to_string())
        .collect::<Vec<_>>()
        .join("&")
}

/// Compares runs that differ only in their single enabled database. Each
/// slice holds one trace per prompt, in the same prompt order.
pub fn coverage_report(context: &[DecodeTrace], model: &[DecodeTrace], stats: &[DecodeTrace]) -> Result<CoverageReport> {
    let runs = [context, model, stats];
    if runs.iter().any(|r| r.len() != context.len()) {
        return Err(Error::MismatchedTrace("runs cover different numbers of prompts".into()));
    }
    for (i, t) in context.iter().enumerate() {
        if model[i].prompt != t.prompt || stats[i].prompt != t.prompt {
            return Err(Error::MismatchedTrace(format!("prompt {i} differs between runs")));
        }
    }
    let mut membership: BTreeMap<AcceptedEvent, u8> = BTreeMap::new();
    let mut report = CoverageReport::default();
    for (db, run) in DbKind::ALL.iter().zip(runs) {
        let mut total = 0;
        for (i, t) in run.iter().enumerate() {
            for ev in accepted_events(t, i) {
                *membership.entry(ev).or_insert(0) |= 1 << db.index();
                total += 1;
            }
        }
        report.totals.insert(db.letter().to_string(), total);
    }
    for mask in 1u8..8 {
        report.regions.insert(region_name(mask), 0);
    }
    for mask in membership.values() {
        *report.regions.get_mut(&region_name(*mask)).unwrap() += 1;
    }
    report.union = membership.len();
    Ok(report)
}
