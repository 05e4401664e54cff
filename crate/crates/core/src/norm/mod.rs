//! Normalization layers: batch normalization, the condensation-gated variant
//! with centering/scaling/affine rectifications, and the IN/LN/GN baselines.

mod alt;
mod batch;
mod config;
mod layer;
mod stats;

pub use alt::{alt_norm_backward, alt_norm_forward, group_count, AltCache, AltOutput};
pub(crate) use batch::backward_from_cache;
pub use batch::{
    bn_eval_forward, bn_train_forward, normalize_with_stats, sigmoid_map, ubn_backward,
    ubn_forward, ForwardCache, Mode, NormGrads, NormOutput, UbnParams,
};
pub use config::{NormConfig, NormKind, ScoreDivisor, TrainStats};
pub use layer::NormLayer;
pub use stats::{condensation_score, gated_update, ubn_update_stats, RunningStats, StatsSelection};
