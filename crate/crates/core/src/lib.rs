//! Masked linear graph-attention recommender.
//!
//! Every user and item is a token. Token inputs concatenate a learnable
//! embedding with a frozen SVD structural encoding; a single kernelized
//! attention layer with a learnable sine degree-centrality mask produces
//! the representations, trained with an alignment + uniformity loss and
//! evaluated with all-ranking Recall@k / NDCG@k.

pub mod attention;
pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod graph_data;
pub mod io_util;
pub mod kernel_features;
pub mod spectral;
pub mod training;

pub use error::{Error, ErrorClass, Result};
