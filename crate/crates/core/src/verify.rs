//! Draft verification against the target model.
//!
//! All candidates of a step are scored as one counted forward pass. The
//! candidate with the longest accepted prefix wins (earliest on ties) and the
//! step emits that prefix plus one token chosen by the model itself, so
//! every step emits at least one token.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::draft::{AccessLog, DbKind, DraftSet};
use crate::error::{Error, Result};
use crate::model::{visible_context, ModelCallCounter, TargetModel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub accepted_len: Vec<usize>,
    pub candidate_lens: Vec<usize>,
    pub candidate_sources: Vec<DbKind>,
    pub winner: Option<usize>,
    /// Accepted prefix of the winner plus the correction/bonus token.
    pub emitted: Vec<TokenId>,
    /// Model-preferred tokens along the winner's path.
    pub recycled: Vec<TokenId>,
    pub drafted_total: usize,
    pub verify_elapsed_ns: u64,
}

impl StepOutcome {
    /// An outcome with per-candidate bookkeeping for `set` and nothing emitted.
    pub fn for_set(set: &DraftSet) -> Self {
        StepOutcome {
            accepted_len: Vec::with_capacity(set.len()),
            candidate_lens: set.candidates.iter().map(|c| c.tokens.len()).collect(),
            candidate_sources: set.candidates.iter().map(|c| c.source).collect(),
            winner: None,
            emitted: Vec::new(),
            recycled: Vec::new(),
            drafted_total: set.candidates.iter().map(|c| c.tokens.len()).sum(),
            verify_elapsed_ns: 0,
        }
    }

    /// Draft tokens accepted from the winning candidate.
    pub fn accepted(&self) -> usize {
        self.winner.map_or(0, |w| self.accepted_len[w])
    }

    pub fn winner_source(&self) -> Option<DbKind> {
        self.winner.map(|w| self.candidate_sources[w])
    }

    pub fn winner_len(&self) -> usize {
        self.winner.map_or(0, |w| self.candidate_lens[w])
    }
}

fn pick_winner(accepted: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &a) in accepted.iter().enumerate() {
        if best.is_none_or(|b| a > accepted[b]) {
            best = Some(i);
        }
    }
    best
}

/// Greedy verification: a draft token is accepted while it equals the
/// model's argmax at its position.
pub fn verify_greedy<M: TargetModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    set: &DraftSet,
    counter: &mut ModelCallCounter,
) -> StepOutcome {
    let start = Instant::now();
    counter.forward(model);
    let base = visible_context(model, context);
    let mut out = StepOutcome::for_set(set);
    let mut next_after = Vec::with_capacity(set.len());
    let mut buf = Vec::with_capacity(base.len() + 8);
    for cand in &set.candidates {
        buf.clear();
        buf.extend_from_slice(base);
        let mut accepted = cand.tokens.len();
        let mut next = None;
        for (j, &t) in cand.tokens.iter().enumerate() {
            let top = model.greedy_next(&buf);
            if top != t {
                accepted = j;
                next = Some(top);
                break;
            }
            buf.push(t);
        }
        out.accepted_len.push(accepted);
        next_after.push(next.unwrap_or_else(|| model.greedy_next(&buf)));
    }

    out.winner = pick_winner(&out.accepted_len);
    match out.winner {
        Some(w) => {
            let acc = out.accepted_len[w];
            out.emitted.extend_from_slice(&set.candidates[w].tokens[..acc]);
            out.emitted.push(next_after[w]);
        }
        None => out.emitted.push(model.greedy_next(base)),
    }
    // Along the winner's path the model's argmax equals each accepted token
    // and then the correction, so the recycled path is the emitted sequence.
    out.recycled = out.emitted.clone();
    out.verify_elapsed_ns = start.elapsed().as_nanos() as u64;
    out
}

/// Sampling verification with point-mass drafts.
///
/// Each position samples from the temperature-adjusted target distribution
/// given everything emitted so far; candidates that disagree with the draw
/// drop out. The step ends when no candidate survives, or after one bonus
/// draw once every survivor is exhausted.
pub fn verify_sampling<M: TargetModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    context: &[TokenId],
    set: &DraftSet,
    temperature: f64,
    rng: &mut R,
    counter: &mut ModelCallCounter,
) -> Result<StepOutcome> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sampling verification needs temperature > 0, got {temperature}"
        )));
    }
    let start = Instant::now();
    counter.forward(model);
    let base = visible_context(model, context);
    let mut out = StepOutcome::for_set(set);
    let mut buf = base.to_vec();
    let mut alive: Vec<usize> = (0..set.len()).collect();
    loop {
        let j = out.emitted.len();
        let y = model.next_distribution(&buf).with_temperature(temperature)?.sample(rng);
        out.emitted.push(y);
        buf.push(y);
        alive.retain(|&i| set.candidates[i].tokens.get(j) == Some(&y));
        if alive.is_empty() {
            break;
        }
        if alive.iter().all(|&i| set.candidates[i].tokens.len() == j + 1) {
            let bonus = model.next_distribution(&buf).with_temperature(temperature)?.sample(rng);
            out.emitted.push(bonus);
            break;
        }
    }

    for cand in &set.candidates {
        let matched = cand
            .tokens
            .iter()
            .zip(&out.emitted)
            .take_while(|(a, b)| a == b)
            .count();
        out.accepted_len.push(matched);
    }
    out.winner = pick_winner(&out.accepted_len);
    let path: &[TokenId] = match out.winner {
        Some(w) => &set.candidates[w].tokens[..out.accepted_len[w]],
        None => &[],
    };
    buf.clear();
    buf.extend_from_slice(base);
    for j in 0..=path.len() {
        out.recycled.push(model.greedy_next(&buf));
        if j < path.len() {
            buf.push(path[j]);
        }
    }
    out.verify_elapsed_ns = start.elapsed().as_nanos() as u64;
    Ok(out)
}

/// Greedy when `temperature == 0`, sampling otherwise.
pub fn verify<M: TargetModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    context: &[TokenId],
    set: &DraftSet,
    temperature: f64,
    rng: &mut R,
    counter: &mut ModelCallCounter,
) -> Result<StepOutcome> {
    if temperature == 0.0 {
        Ok(verify_greedy(model, context, set, counter))
    } else {
        verify_sampling(model, context, set, temperature, rng, counter)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbTally {
    pub draft_failure: u64,
    pub draft_success: u64,
    pub verify_success: u64,
}

impl DbTally {
    pub fn attempts(&self) -> u64 {
        self.draft_failure + self.draft_success
    }

    fn add(&mut self, other: &DbTally) {
        self.draft_failure += other.draft_failure;
        self.draft_success += other.draft_success;
        self.verify_success += other.verify_success;
    }
}

/// Per-database access outcomes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbTallies {
    #[serde(rename = "c")]
    pub context: DbTally,
    #[serde(rename = "m")]
    pub model: DbTally,
    #[serde(rename = "s")]
    pub stats: DbTally,
}

impl DbTallies {
    pub fn get(&self, db: DbKind) -> &DbTally {
        match db {
            DbKind::Context => &self.context,
            DbKind::Model => &self.model,
            DbKind::Stats => &self.stats,
        }
    }

    pub fn get_mut(&mut self, db: DbKind) -> &mut DbTally {
        match db {
            DbKind::Context => &mut self.context,
            DbKind::Model => &mut self.model,
            DbKind::Stats => &mut self.stats,
        }
    }

    pub fn add(&mut self, other: &DbTallies) {
        for db in DbKind::ALL {
            self.get_mut(db).add(other.get(db));
        }
    }
}

/// Classifies each attempted probe of a step as a draft failure (nothing
/// returned) or success, and credits a verify success to the database that
/// supplied a winner with at least one accepted token.
pub fn attribute_verify_success(step: &StepOutcome, log: &AccessLog) -> Result<DbTallies> {
    let n = step.candidate_sources.len();
    if step.accepted_len.len() != n || step.candidate_lens.len() != n {
        return Err(Error::MismatchedTrace("per-candidate vectors differ in length".into()));
    }
    for db in DbKind::ALL {
        let from_db = step.candidate_sources.iter().filter(|&&s| s == db).count();
        let admitted = log.get(db).map_or(0, |e| e.admitted);
        if from_db != admitted {
            return Err(Error::MismatchedTrace(format!(
                "{from_db} candidates from {db} but the log admitted {admitted}"
            )));
        }
    }
    let mut tallies = DbTallies::default();
    for e in log.entries.iter().filter(|e| e.attempted) {
        let t = tallies.get_mut(e.db);
        if e.returned == 0 {
            t.draft_failure += 1;
        } else {
            t.draft_success += 1;
        }
    }
    if let Some(src) = step.winner_source() {
        if step.accepted() >= 1 {
            tallies.get_mut(src).verify_success += 1;
        }
    }
    Ok(tallies)
}
