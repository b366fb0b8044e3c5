//! The BiTransGCN forecaster: model assembly, training, checkpoints and
//! accuracy metrics.

mod checkpoint;
mod data;
mod metrics;
mod model;
mod train;

pub use data::FlowTensor;
pub use metrics::{evaluate, rate_of_change, MetricsReport, RateOfChange, METRIC_HEADER};
pub use model::{BiTransGcn, BiTransGcnConfig, LrDecay, CONFIG_KEYS};
pub use train::{
    historical_average, holdout, smooth, train, Checkpoint, Holdout, Normalization, SplitPlan, TARGET_FEATURE,
};
