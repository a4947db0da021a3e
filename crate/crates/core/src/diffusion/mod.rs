//! Forward noising, the conditional denoiser, and multi-scale feature fusion.

pub mod denoiser;
pub mod features;
pub mod schedule;

pub use denoiser::{extract_features, Denoiser, ToyUnet, ToyUnetConfig};
pub use features::{
    aggregate_target, AggregatedFeatureMap, FeatureAggregator, FeatureLevel, FeaturePyramid, AGGREGATE_STRIDE,
};
pub use schedule::{NoiseSchedule, ScheduleKind};
