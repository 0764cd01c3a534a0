//! Hierarchical draft assembly.
//!
//! Databases are probed in the configured order, each asked for the number
//! of candidates still missing, until the draft set holds `N` distinct
//! sequences. A sequence already in the set keeps its first source.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::db::{ContextDb, ModelDb, StatsDb};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DbKind {
    Context,
    Model,
    Stats,
}

impl DbKind {
    pub const ALL: [DbKind; 3] = [DbKind::Context, DbKind::Model, DbKind::Stats];

    pub fn letter(self) -> char {
        match self {
            DbKind::Context => 'c',
            DbKind::Model => 'm',
            DbKind::Stats => 's',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'c' => Some(DbKind::Context),
            'm' => Some(DbKind::Model),
            's' => Some(DbKind::Stats),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for DbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// A subset of the three databases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct DbSet([bool; 3]);

impl DbSet {
    pub const NONE: DbSet = DbSet([false; 3]);
    pub const ALL: DbSet = DbSet([true; 3]);

    pub fn contains(self, db: DbKind) -> bool {
        self.0[db.index()]
    }

    pub fn with(mut self, db: DbKind) -> Self {
        self.0[db.index()] = true;
        self
    }

    pub fn is_empty(self) -> bool {
        self == Self::NONE
    }

    pub fn iter(self) -> impl Iterator<Item = DbKind> {
        DbKind::ALL.into_iter().filter(move |&d| self.contains(d))
    }

    /// The 7 non-empty subsets, singletons first.
    pub fn non_empty_subsets() -> Vec<DbSet> {
        let mut all: Vec<DbSet> = (1u8..8)
            .map(|bits| DbSet([bits & 1 != 0, bits & 2 != 0, bits & 4 != 0]))
            .collect();
        all.sort_by_key(|s| (s.iter().count(), s.0.map(|b| !b)));
        all
    }
}

impl fmt::Display for DbSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.iter().map(|d| d.letter().to_string()).collect();
        write!(f, "{}", s.join(","))
    }
}

impl FromStr for DbSet {
    type Err = Error;

    /// Accepts `"c,m,s"`, `"cms"`, `"s"` or `"none"`.
    fn from_str(s: &str) -> Result<Self> {
        let mut set = DbSet::NONE;
        if s.trim() == "none" {
            return Ok(set);
        }
        for c in s.chars().filter(|c| *c != ',' && !c.is_whitespace()) {
            let db = DbKind::from_letter(c)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown database {c:?} in {s:?}")))?;
            set = set.with(db);
        }
        Ok(set)
    }
}

/// Probe order: a sequence of distinct databases.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AccessOrder(Vec<DbKind>);

impl AccessOrder {
    pub fn new(order: Vec<DbKind>) -> Result<Self> {
        for (i, d) in order.iter().enumerate() {
            if order[..i].contains(d) {
                return Err(Error::InvalidArgument(format!("database {d} repeated in access order")));
            }
        }
        Ok(AccessOrder(order))
    }

    pub fn as_slice(&self) -> &[DbKind] {
        &self.0
    }

    /// All 6 orderings of c, m, s.
    pub fn permutations() -> Vec<AccessOrder> {
        ["cms", "csm", "mcs", "msc", "scm", "smc"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect()
    }
}

impl Default for AccessOrder {
    fn default() -> Self {
        AccessOrder(DbKind::ALL.to_vec())
    }
}

impl fmt::Display for AccessOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.0 {
            write!(f, "{}", d.letter())?;
        }
        Ok(())
    }
}

impl FromStr for AccessOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let order = s
            .chars()
            .map(|c| {
                DbKind::from_letter(c)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown database {c:?} in order {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        AccessOrder::new(order)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchyConfig {
    pub order: AccessOrder,
    pub enabled: DbSet,
    /// Maximum draft set size `N`.
    pub max_candidates: usize,
    /// Context tokens used to query the statistics database (`l`).
    pub prefix_len: usize,
    /// Maximum draft length (`m`).
    pub draft_len: usize,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            order: AccessOrder::default(),
            enabled: DbSet::ALL,
            max_candidates: 7,
            prefix_len: 2,
            draft_len: 4,
        }
    }
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_candidates == 0 || self.prefix_len == 0 || self.draft_len == 0 {
            return Err(Error::InvalidArgument("N, l and m must all be >= 1".into()));
        }
        if let Some(d) = self.enabled.iter().find(|d| !self.order.as_slice().contains(d)) {
            return Err(Error::InvalidArgument(format!(
                "enabled database {d} missing from access order {}",
                self.order
            )));
        }
        Ok(())
    }

    /// Enabled databases in probe order.
    pub fn probe_sequence(&self) -> impl Iterator<Item = DbKind> + '_ {
        self.order.as_slice().iter().copied().filter(|&d| self.enabled.contains(d))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftCandidate {
    pub tokens: Vec<TokenId>,
    pub source: DbKind,
}

/// Distinct candidates in retrieval order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DraftSet {
    pub candidates: Vec<DraftCandidate>,
}

impl DraftSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn contains(&self, tokens: &[TokenId]) -> bool {
        self.candidates.iter().any(|c| c.tokens == tokens)
    }

    /// Adds `tokens` unless empty or already present.
    pub fn push(&mut self, tokens: Vec<TokenId>, source: DbKind) -> bool {
        if tokens.is_empty() || self.contains(&tokens) {
            return false;
        }
        self.candidates.push(DraftCandidate { tokens, source });
        true
    }

    pub fn from_tokens(source: DbKind, seqs: Vec<Vec<TokenId>>) -> Self {
        let mut set = DraftSet::default();
        for s in seqs {
            set.push(s, source);
        }
        set
    }
}

/// One database probe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbAccess {
    pub db: DbKind,
    pub attempted: bool,
    /// Sequences the database handed back.
    pub returned: usize,
    /// Sequences that made it into the draft set after de-duplication.
    pub admitted: usize,
    pub elapsed_ns: u64,
}

/// Probes of one drafting step, one entry per enabled database in order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLog {
    pub entries: Vec<DbAccess>,
}

impl AccessLog {
    pub fn get(&self, db: DbKind) -> Option<&DbAccess> {
        self.entries.iter().find(|e| e.db == db)
    }

    pub fn attempted(&self, db: DbKind) -> bool {
        self.get(db).is_some_and(|e| e.attempted)
    }

    pub fn total_elapsed_ns(&self) -> u64 {
        self.entries.iter().map(|e| e.elapsed_ns).sum()
    }

    /// Size of the draft set right before `db` was probed.
    pub fn filled_before(&self, db: DbKind) -> usize {
        self.entries
            .iter()
            .take_while(|e| e.db != db)
            .map(|e| e.admitted)
            .sum()
    }

    pub fn clear_timings(&mut self) {
        for e in &mut self.entries {
            e.elapsed_ns = 0;
        }
    }
}

/// The read-only databases shared between sessions.
#[derive(Debug, Clone, Copy, Default)]
pub struct SharedDbs<'a> {
    pub model: Option<&'a ModelDb>,
    pub stats: Option<&'a StatsDb>,
}

fn probe(
    db: DbKind,
    context: &[TokenId],
    ctx_db: &mut ContextDb,
    shared: SharedDbs<'_>,
    config: &HierarchyConfig,
    want: usize,
) -> Vec<Vec<TokenId>> {
    let key = *context.last().expect("context is non-empty");
    let m = config.draft_len;
    let mut seqs = match db {
        DbKind::Context => ctx_db.lookup(key, want),
        DbKind::Model => shared.model.map(|d| d.lookup(key, want)).unwrap_or_default(),
        DbKind::Stats => shared
            .stats
            .map(|d| {
                let tail = &context[context.len().saturating_sub(config.prefix_len)..];
                d.retrieve(tail, m, want).into_iter().map(|(s, _)| s).collect()
            })
            .unwrap_or_default(),
    };
    for s in &mut seqs {
        s.truncate(m);
    }
    seqs
}

/// Builds the draft set for the next step after `context`.
pub fn hierarchical_draft(
    context: &[TokenId],
    ctx_db: &mut ContextDb,
    shared: SharedDbs<'_>,
    config: &HierarchyConfig,
) -> (DraftSet, AccessLog) {
    assert!(!context.is_empty(), "drafting needs at least one context token");
    let mut set = DraftSet::default();
    let mut log = AccessLog::default();
    for db in config.probe_sequence() {
        if set.len() >= config.max_candidates {
            log.entries.push(DbAccess {
                db,
                attempted: false,
                returned: 0,
                admitted: 0,
                elapsed_ns: 0,
            });
            continue;
        }
        let start = Instant::now();
        let seqs = probe(db, context, ctx_db, shared, config, config.max_candidates - set.len());
        let returned = seqs.len();
        let before = set.len();
        for s in seqs {
            if set.len() == config.max_candidates {
                break;
            }
            set.push(s, db);
        }
        log.entries.push(DbAccess {
            db,
            attempted: true,
            returned,
            admitted: set.len() - before,
            elapsed_ns: start.elapsed().as_nanos() as u64,
        });
    }
    (set, log)
}
