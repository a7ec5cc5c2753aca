//! Model-ready views of a trace: per-item sub-tables, descendant sets,
//! hypergraph incidence, window examples with oracle labels, item splits and
//! the on-disk dataset format.

pub mod blocks;
mod dataset;
mod examples;
mod graph;
mod incidence;
mod split;
mod store;
mod subtable;

pub use dataset::{Dataset, DatasetConfig, Manifest, SCHEMA_VERSION};
pub use examples::{build_examples, series_examples, DayGraph, ItemSeries, TrainingExample};
pub use graph::{dfs_descendants, sample_descendants, DescendantSets};
pub use incidence::{build_incidence, GlobalIndex, IncidenceMatrix};
pub use split::{split_items, Split, Splits};
pub use store::{decode_item, encode_item, fingerprint, load_dataset, load_manifest, save_dataset, MANIFEST};
pub use subtable::{build_subtable, SubTable};

use crate::simkit::{ItemId, SimError};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("item {0} does not occur in the trace")]
    MissingItem(ItemId),
    #[error("graph: {0}")]
    Graph(String),
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("{items} item(s) cannot fill {splits} non-empty splits")]
    TooFewItems { items: usize, splits: usize },
    #[error("schema version {found}, expected {expected}")]
    Schema { found: u32, expected: u32 },
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Missing { path: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
}
