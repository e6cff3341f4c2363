//! Unsupervised meta-learning engine and experiment harness.
//!
//! The crate trains a shared feature extractor (the *body*) through bi-level
//! optimization where each inner-loop task is constructed from unlabeled data:
//! a batch is embedded, density-clustered, pseudo-labeled by cluster serial
//! number, and learned by a freshly initialized, cluster-sized classification
//! *head*. Supervised baselines (MAML/ANIL-style meta-learning, whole-class
//! training, multi-task learning) and SVCCA-based representation-stability
//! instrumentation are included for side-by-side experiments.
//!
//! Start with the guide in `book/` or the [`meta`] and [`harness`] modules.

pub mod checkpoint;
pub mod clustering;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod linalg;
pub mod meta;
pub mod repstab;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

// Every guide chapter runs as a doctest so the book's snippets stay in sync
// with the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors-and-gradients.md")]
    mod tensors_and_gradients {}
    #[doc = include_str!("../../../book/src/second-order-adaptation.md")]
    mod second_order_adaptation {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering_chapter {}
    #[doc = include_str!("../../../book/src/representation-stability.md")]
    mod representation_stability {}
    #[doc = include_str!("../../../book/src/data-and-episodes.md")]
    mod data_and_episodes {}
    #[doc = include_str!("../../../book/src/bilevel-training.md")]
    mod bilevel_training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation_chapter {}
    #[doc = include_str!("../../../book/src/harness-and-cli.md")]
    mod harness_and_cli {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    mod file_formats {}
}
