//! Shallow multi-label classification heads over frozen image embeddings.
//!
//! The crate covers the whole experimental loop: an annotated dataset model
//! with tiered labels (primary / secondary motifs, red-flag / canonical
//! tags), a binary embedding store, MLP and convolutional heads with
//! hand-derived gradients, the tier-weighted BCE objective, Adam, example
//! based metrics, k-means over normalized embeddings, and an ablation grid
//! runner.
//!
//! Data-parallel inner loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iterators
//! otherwise. Reductions always happen in a fixed order, so results are
//! bit-identical with or without the feature and for any thread count.

pub mod cli;
pub mod cluster;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numkernel;
pub mod optim;
pub mod par;
pub mod sweep;
pub mod trainer;

pub use error::{Error, Result};
