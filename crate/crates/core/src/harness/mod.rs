//! Desk-scale training: models, data, optimizer, schedule and the loop.

pub mod config;
pub mod data;
pub mod loss;
pub mod model;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod train;

pub use config::{DatasetConfig, TrainConfig, DATA_DIR_ENV};
pub use data::{gen_condensed_batch, load_cifar10, Dataset, Split, Standardization, SyntheticSpec};
pub use model::{tiny_conv_net, LayerSpec, Model};
pub use schedule::LrSchedule;
pub use train::{
    evaluate, prepare_data, probe_model, select_probe_indices, train, write_metrics_csv,
    MetricsRow, PreparedData, RunStatus, TrainOutcome,
};
