//! Cross-modal selective state-space classifier: a tape autodiff engine,
//! the selective scan and its SSM block, video/skeleton encoders, CLS-mixing
//! fusion, training and baseline-comparison reporting.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod params;
pub mod report;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use data::{Dataset, Sample, SyntheticDatasetSpec};
pub use encoders::ModelConfig;
pub use error::{Error, Result};
pub use fusion::StrategyKind;
pub use model::{Architecture, Classifier};
pub use params::{ParamId, ParamStore};
pub use ssm::SsmBlockConfig;
pub use tensor::Tensor;
pub use train::{History, TrainConfig, TrainOutcome};
