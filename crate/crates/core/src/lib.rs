//! Representation-level verification of machine unlearning.
//!
//! Two representation lenses compare penultimate embeddings of an original
//! model, an unlearned model and a retrain-from-scratch oracle:
//! a forget-set similarity gap (M1, M2, M3) and a nearest-retain-neighbour
//! percentile rank (M4). Output-level checks (loss-threshold MIA, accuracy),
//! a tabular MLP training harness with five unlearning methods, and the
//! statistics used to aggregate results (Wilcoxon, random-intercept LMM,
//! Benjamini-Hochberg) sit alongside.

pub mod data;
pub mod embedding;
pub mod lens1;
pub mod lens2;
pub mod output;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod train;

use thiserror::Error;

pub use data::{PartitionSpec, TabularDataset};
pub use embedding::{EmbeddingMatrix, ModelRole};
pub use lens1::{Lens1Result, ModelTriple};
pub use lens2::Lens2Result;
pub use scalar::Scalar;
pub use train::{Method, Mlp};

/// Embeddings as produced by the harness and stored on disk.
pub type Embeddings = EmbeddingMatrix<f32>;
/// Embeddings promoted to double precision.
pub type Embeddings64 = EmbeddingMatrix<f64>;
/// The MLP used for every tabular experiment.
pub type TabularMlp = Mlp<f64>;
/// A single-precision MLP, for memory-bound runs.
pub type TabularMlp32 = Mlp<f32>;
pub type Triple = ModelTriple<f32>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Embedding(#[from] embedding::EmbeddingError),
    #[error(transparent)]
    Lens1(#[from] lens1::Lens1Error),
    #[error(transparent)]
    Lens2(#[from] lens2::Lens2Error),
    #[error(transparent)]
    Stat(#[from] stats::StatError),
    #[error(transparent)]
    Output(#[from] output::OutputError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
