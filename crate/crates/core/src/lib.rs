//! Set-equivariant networks built from SWARM layers, set-linear layers and
//! a sequence-LSTM baseline, trained for amortized clustering of synthetic
//! Gaussian-mixture tasks.
//!
//! Batches are laid out `[batch, feature, entity]` with zero padding and a
//! per-task length; every masked operation ignores padding positions.

pub mod array;
pub mod assignment;
pub mod batch;
pub mod checkpoint;
mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod params;
pub mod scalar;
pub mod set_layers;
pub mod swarm;
pub mod taskgen;
pub mod trainer;

pub use array::Array;
pub use batch::PopulationBatch;
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Model, ModelFamily, ModelSpec, Readout};
pub use scalar::Scalar;
pub use taskgen::{ClusterTask, Dataset, DatasetManifest, TaskKind};
pub use trainer::{TrainConfig, TrainOptions};
