//! The three draft databases, from highest to lowest temporal locality.

pub mod context;
pub mod model;
pub mod stats;

pub use context::ContextDb;
pub use model::ModelDb;
pub use stats::StatsDb;
