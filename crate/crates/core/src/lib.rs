//! Temporal stochastic bias correction for daily temperature series.

pub mod alloc;
pub mod autodiff;
pub mod baselines;
pub mod batch;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use baselines::{apply_baseline, BaselineSpec, Method};
pub use batch::{BatchConfig, FeatureSpec, TrainingExample, WindowConfig};
pub use data::{Calendar, NormStats, PairedDataset, SourceTag, TimeSeries};
pub use metrics::{report, ReportConfig, ScoreReport};
pub use model::{Model, ModelCheckpoint, ModelConfig};
pub use sampler::{sample_all_runs, sample_trajectories, SamplerConfig, Trajectory};
pub use synth::{Kernel, SynthMeta, SyntheticPair};
pub use train::{train, train_with, StopReason, TrainConfig, TrainOutput};
