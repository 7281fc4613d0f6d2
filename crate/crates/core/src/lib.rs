//! Novel-class discovery on precomputed embeddings under a domain shift.
//!
//! Given a labeled *source* embedding set and an unlabeled *target* set
//! that contains the source classes under a domain shift plus classes never
//! seen in the source, the crate assigns every target sample to a seen class
//! or to a newly discovered one.
//!
//! The procedure clusters first and matches second:
//!
//! 1. [`prototypes::train_seen_prototypes`] fits a normalized linear
//!    classifier on the source; [`prototypes::target_prototypes`] runs
//!    K-means on the target.
//! 2. [`matching`] counts which target prototype each source sample lands
//!    on, softmaxes the counts per class, thresholds them, and keeps the
//!    unmatched prototypes as novel classes.
//! 3. [`finetune`] trains the combined classifier and a residual adapter
//!    with source cross-entropy plus a mean-prediction entropy regularizer.
//!
//! [`pipeline::crow_discover`] runs the whole thing; [`evaluation`] scores
//! predictions with seen accuracy, Hungarian-matched unseen accuracy and the
//! H-score. The guide under `book/` walks through each step.
//!
//! ```
//! use crow::config::DiscoveryConfig;
//! use crow::pipeline::{crow_discover, ClassCount};
//! use crow::synthgen::{generate, Scenario};
//!
//! let scenario = Scenario { dim: 16, seen_count: 3, novel_count: 2, samples_per_class: 40, ..Default::default() };
//! let data = generate(&scenario).unwrap();
//! let config = DiscoveryConfig { iterations: 100, ..Default::default() };
//! let run = crow_discover(&data.source, &data.target, ClassCount::Known(5), &config, Some(&data.target_truth)).unwrap();
//! assert!(run.report.eval.unwrap().h_score.unwrap() > 0.9);
//! ```

pub mod assignment;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod finetune;
pub mod io;
pub mod kmeans;
pub mod linalg;
pub mod matching;
pub mod pipeline;
pub mod prototypes;
pub mod synthgen;

pub use config::{AdapterKind, DiscoveryConfig};
pub use data::{ClassCatalog, EmbeddingSet, PredictionSet};
pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/finetuning.md")]
    mod finetuning {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/testing.md")]
    mod testing {}
}
