//! Simulator for interval-gated cloud/device collaborative decoding.
//!
//! A device model drafts tokens, an Inter-Head turns its state into
//! probability intervals, and tokens whose interval uncertainty exceeds a
//! threshold are sent to a cloud model for verification.

pub mod decoder;
pub mod error;
pub mod experiment;
pub mod interval;
pub mod math;
pub mod netsim;
pub mod properties;
pub mod toy;
pub mod training;

pub use decoder::{
    run_baseline_cloud, run_baseline_device, run_ciar, run_fixed_split, run_policy,
    run_uniform_verification, CallKind, CloudCall, DecodeConfig, DecodeTrace, Episode, EpisodeMetrics,
    FeatureMode, Origin, Policy, ThresholdPolicy, TraceRecord,
};
pub use error::{Error, Result};
pub use interval::{
    inter_fuse, uncertainty_score, FuseConfig, LogitIntervalVec, ProbIntervalVec, UncertaintyBreakdown,
};
pub use netsim::{episode_latency, ComputeCost, LatencyReport, NetworkProfile, PayloadModel};
pub use toy::{
    inter_head_forward, AnalyticHeadConfig, InterHeadParams, ModelParams, SceneSpec, ToyWorld,
};
pub use training::{train, InterDroConfig, LossBreakdown, TrainingBatch};
