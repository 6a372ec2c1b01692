//! Desk-scale training harness for ghost noise experiments: a fully connected
//! network with exact gradients, SGD with momentum on a cosine schedule,
//! synthetic and IDX datasets, single runs and parallel sweeps.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
mod linalg;
pub mod mlp;
pub mod optim;
pub mod sweep;

pub use config::ExperimentConfig;
pub use data::{BlobsConfig, Dataset, Splits};
pub use error::{Result, TrainError};
pub use experiment::{run_experiment, EpochRecord, Metrics, TrainConfig};
pub use mlp::{EagnPlacement, Mlp, MlpSpec, Mode, NoiseSource, NormKind};
pub use sweep::{sweep, AxisKind, SweepAxis, SweepResult};
