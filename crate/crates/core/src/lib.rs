//! Variational autoencoder whose encoder is also trained, every epoch, to make
//! a target property predictable by exact Gaussian-process regression on the
//! latent means. Includes the two benchmark datasets (procedural card suits and
//! one-hot token sequences), the evaluation metrics, and the on-disk formats
//! used by the command-line harness.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cards;
pub mod checkpoint;
pub mod config;
pub mod gp;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod run;
pub mod sequences;
pub mod split;
pub mod store;
pub mod tensor;
pub mod trainer;
pub mod vae;

pub use cards::{CardSample, Suit};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointManifest};
pub use config::{ConfigError, DatasetConfig, ExperimentConfig};
pub use gp::{GpError, GpHyperparams, GpPosterior, GpPredictor, GpRawParams};
pub use nn::{Activation, AdamState, LayerSpec, MlpModel};
pub use metrics::MetricReport;
pub use rng::Rng;
pub use sequences::{Alphabet, SequenceSample};
pub use split::{AngleSplit, RangeSplit, Split, TargetSplit};
pub use store::{StoreError, StoredDataset};
pub use tensor::{Matrix, TensorError};
pub use trainer::{
    fit, fit_from, generate_for_target, predict_target, train_epoch, Dataset, DklVaeModel,
    GenerateConfig, TrainConfig, TrainError, TrainHistory,
};
pub use vae::{LatentGaussian, VaeArchitecture, VaeModel};
