//! Speculative decoding with hierarchical database drafting.
//!
//! Draft sequences come from three databases ordered by temporal locality:
//! a per-session [`ContextDb`], a static [`ModelDb`] of frequent model
//! generations, and a suffix-array [`StatsDb`] over a large corpus. Drafts
//! are verified against a [`TargetModel`]; [`KGramModel`] is the bundled
//! deterministic reference model.

mod binfmt;
pub mod analysis;
pub mod bench;
pub mod corpus;
pub mod db;
pub mod draft;
pub mod engine;
pub mod error;
pub mod model;
pub mod verify;

pub use corpus::{load_corpus, Corpus, Segmentation, TokenId, Vocab, EOS, SEP, UNK};
pub use db::{ContextDb, ModelDb, StatsDb};
pub use draft::{hierarchical_draft, AccessLog, AccessOrder, DbKind, DbSet, DraftCandidate, DraftSet, HierarchyConfig, SharedDbs};
pub use engine::{aggregate_metrics, autoregressive_decode, decode, decode_batch, DecodeConfig, DecodeMetrics, DecodeOutput, DecodeTrace, Decoder};
pub use error::{Error, Result};
pub use model::{score_positions, KGramModel, ModelCallCounter, NextTokenDistribution, TargetModel};
pub use verify::{attribute_verify_success, verify_greedy, verify_sampling, DbTallies, DbTally, StepOutcome};
