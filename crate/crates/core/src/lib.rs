//! Graph prototypical networks for few-shot classification under data shift.
//!
//! Class prototypes are a convex mix of a task-specific part (the mean
//! embedding of an episode's support samples) and a task-shared part
//! predicted by a graph convolution over a concept taxonomy whose nodes
//! carry word vectors. Mixing weight 1 recovers plain prototypical
//! networks; weight 0 is zero-shot classification from the graph alone.
//!
//! Layout:
//! - [`autodiff`]: reverse-mode tape over dense `f64` tensors
//! - [`kg`]: concept graph construction and file formats
//! - [`gcn`]: graph convolution producing one prototype per node
//! - [`episodes`]: N-way K-shot sampling under the shift settings
//! - [`model`]: encoder, prototype mixing, classification and loss
//! - [`optim`]: SGD with momentum and Adam
//! - [`trainer`]: episodic training, evaluation, lambda sweeps, ablations
//! - [`synth`]: synthetic shifted benchmarks with a taxonomy

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod autodiff;
mod checkpoint;
pub mod episodes;
pub mod gcn;
pub mod kg;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use autodiff::{grad_check, grad_check_many, AutodiffError, Tape, Tensor, Var};
pub use episodes::{Episode, EpisodeError, FeatureDataset, ShiftSetting, Split};
pub use gcn::{Activation, GcnModel};
pub use kg::{ClassNodeMap, ConceptGraph, GraphError};
pub use model::{DistanceMode, Encoder, GpnModel, PrototypeSet, SharedBranch};
pub use trainer::{EvalReport, TrainConfig};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Diverged { iteration: usize, loss: f64 },
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
