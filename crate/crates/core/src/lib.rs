//! Self-supervised terrain texture clustering and retrieval.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`patchex`] cuts source images into overlapping patches and assigns
//!    leakage-free train/test splits.
//! 2. [`nnet`] embeds a patch with a texture-aware network: a small CNN
//!    backbone feeds an orderless encoding branch and a global-average branch,
//!    fused by bilinear pooling and projected to the embedding.
//! 3. [`cluster`] whitens embeddings and assigns K-means pseudo-labels.
//! 4. [`dcml`] alternates clustering with triplet-loss training on the
//!    pseudo-labels until cluster assignments stabilise.
//! 5. [`retrieval`] answers exact k-NN queries over the test split and scores
//!    them with Precision@K against expert labels coded in [`taxonomy`].

pub mod autograd;
pub mod cluster;
pub mod config;
pub mod dcml;
pub mod nnet;
pub mod patchex;
pub mod retrieval;
pub mod store;
pub mod synthetic;
pub mod taxonomy;
pub mod tensor;

pub use tensor::{Real, Tensor};

/// Top-level error for the orchestration paths that cross module boundaries.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Patch(#[from] patchex::PatchError),
    #[error(transparent)]
    Model(#[from] nnet::ModelError),
    #[error(transparent)]
    Cluster(#[from] cluster::ClusterError),
    #[error(transparent)]
    Train(#[from] dcml::TrainError),
    #[error(transparent)]
    Retrieval(#[from] retrieval::RetrievalError),
    #[error(transparent)]
    Store(#[from] store::StoreError),
    #[error(transparent)]
    Taxonomy(#[from] taxonomy::ParseError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
