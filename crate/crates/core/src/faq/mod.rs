//! Cold-start dataset construction for FAQ pair matching.
//!
//! A knowledge base lists knowledge points, each a standard question with
//! similar questions that share its answer. Positive pairs come from within
//! a point, hard negatives from BM25-ranked questions of other points.

pub mod bm25;
pub mod kb;
pub mod pairs;
pub mod synthetic;

pub use bm25::{Bm25Index, Bm25Params, CorpusStats};
pub use kb::{KnowledgeBase, KnowledgePoint};
pub use pairs::{
    build_dataset, build_negatives, build_positives, DatasetOptions, LabeledPair, LabeledPairs,
    Split,
};
pub use synthetic::{make_synthetic_tenants, SyntheticConfig};
