//! Collaborative decoding: the uncertainty-gated CIAR loop and the
//! baselines it is compared against.

mod export;
mod run;

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Result};
use crate::interval::FuseConfig;
use crate::netsim::PayloadModel;

pub use export::{write_metrics_csv, write_trace_jsonl, MetricsRow, METRICS_HEADER};
pub use run::{
    dynamic_threshold, gate_defers, interval_feature, run_baseline_cloud, run_baseline_device,
    run_ciar, run_fixed_split, run_policy, run_uniform_verification, verify_buffer,
    BufferedToken, Verification,
};

/// How the acceptance threshold is chosen at each gate evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdPolicy {
    /// Always `tau`.
    #[default]
    Static,
    /// The `q`-quantile (nearest rank) of the last `window` gate scores;
    /// `tau` until `window` scores have been seen.
    RollingQuantile { q: f64, window: usize },
}

/// Which interval feature travels with verified tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Hidden state plus the full lower/upper vectors.
    #[default]
    Full,
    /// Hidden state plus `[Omega, Sigma, score, top-8 widths]`.
    Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub seq_len: usize,
    /// Device buffer length per verification episode.
    #[serde(rename = "K")]
    pub k: usize,
    /// Uncertainty threshold; scores above it are deferred to the cloud.
    #[serde(with = "tau_serde")]
    pub tau: f64,
    /// Prefix rate: the cloud writes the first `floor(rho * seq_len)` tokens.
    pub rho: f64,
    pub seed: u64,
    pub threshold_policy: ThresholdPolicy,
    pub feature_mode: FeatureMode,
    pub fuse: FuseConfig,
    pub payload: PayloadModel,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            seq_len: 256,
            k: 4,
            tau: 0.3,
            rho: 0.06,
            seed: 0,
            threshold_policy: ThresholdPolicy::Static,
            feature_mode: FeatureMode::Full,
            fuse: FuseConfig::default(),
            payload: PayloadModel::default(),
        }
    }
}

impl DecodeConfig {
    pub fn prefix_len(&self) -> usize {
        ((self.rho * self.seq_len as f64).floor() as usize).min(self.seq_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(invalid("seq_len must be positive"));
        }
        if self.k == 0 {
            return Err(invalid("K must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(invalid(format!("tau must be >= 0 or inf, got {}", self.tau)));
        }
        if let ThresholdPolicy::RollingQuantile { q, window } = self.threshold_policy {
            if !(q > 0.0 && q <= 1.0) {
                return Err(invalid(format!("rolling quantile q must lie in (0, 1], got {q}")));
            }
            if window == 0 {
                return Err(invalid("rolling quantile window must be positive"));
            }
        }
        let fuse = &self.fuse;
        if !(fuse.lower_target > 0.0 && fuse.lower_target <= 1.0 && fuse.upper_target >= 1.0) {
            return Err(invalid("fuse targets must satisfy 0 < lower_target <= 1 <= upper_target"));
        }
        if !(fuse.radius_clamp_max > 0.0 && fuse.radius_clamp_max.is_finite()) {
            return Err(invalid("radius_clamp_max must be positive and finite"));
        }
        self.payload.validate()
    }
}

/// Threshold values in JSON: a number, or `"inf"` for "never defer".
pub mod tau_serde {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn parse(text: &str) -> std::result::Result<f64, String> {
        match text.trim().to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
            other => other
                .parse::<f64>()
                .map_err(|_| format!("expected a number or \"inf\", got {text:?}")),
        }
    }

    pub fn serialize<S: Serializer>(tau: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if tau.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*tau)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(x),
            Raw::Text(t) => parse(&t).map_err(serde::de::Error::custom),
        }
    }
}

/// A threshold value with the `"inf"` JSON convention, for sweep grids.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tau(#[serde(with = "tau_serde")] pub f64);

/// Which model emitted a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Prefix,
    Device,
    CloudVerified,
    CloudResampled,
}

impl Origin {
    pub fn is_cloud(self) -> bool {
        self != Origin::Device
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub pos: usize,
    pub token: usize,
    pub origin: Origin,
    /// Gate score of the device proposal at this position, when the device
    /// evaluated it.
    pub uncertainty: Option<f64>,
    pub boundary: bool,
    pub uplink_bits: f64,
    pub downlink_bits: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    /// Cloud-written prefix, sent down once.
    Prefix,
    /// Device buffer sent up for verification; accepted and resampled
    /// tokens sent down.
    Verify,
    /// Plain cloud generation of a block of tokens.
    Generate,
}

/// One device/cloud exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudCall {
    /// Position of the first token the call covers.
    pub start: usize,
    pub kind: CallKind,
    pub tokens_up: usize,
    pub tokens_down: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub records: Vec<TraceRecord>,
    pub calls: Vec<CloudCall>,
    pub device_steps: usize,
    pub cloud_steps: usize,
}

impl DecodeTrace {
    pub fn tokens(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.token).collect()
    }

    pub fn episodes(&self) -> usize {
        self.calls.iter().filter(|c| c.kind == CallKind::Verify).count()
    }
}

/// Gate outcomes split by boundary / interior positions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GateStats {
    pub boundary_evals: usize,
    pub boundary_defers: usize,
    pub interior_evals: usize,
    pub interior_defers: usize,
}

impl GateStats {
    pub fn record(&mut self, boundary: bool, deferred: bool) {
        if boundary {
            self.boundary_evals += 1;
            self.boundary_defers += deferred as usize;
        } else {
            self.interior_evals += 1;
            self.interior_defers += deferred as usize;
        }
    }

    pub fn boundary_defer_rate(&self) -> Option<f64> {
        (self.boundary_evals > 0).then(|| self.boundary_defers as f64 / self.boundary_evals as f64)
    }

    pub fn interior_defer_rate(&self) -> Option<f64> {
        (self.interior_evals > 0).then(|| self.interior_defers as f64 / self.interior_evals as f64)
    }
}

/// Decoding strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Ciar,
    /// Every device block goes to the cloud.
    Uniform,
    BaseCloud,
    BaseDevice,
    /// The first `split` fraction of tokens from the cloud, the rest from
    /// the device.
    FixedSplit(f64),
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Ciar => "ciar",
            Policy::Uniform => "uniform",
            Policy::BaseCloud => "base_cloud",
            Policy::BaseDevice => "base_device",
            Policy::FixedSplit(_) => "fixed_split",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::FixedSplit(s) => write!(f, "fixed_split({s})"),
            p => f.write_str(p.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub policy: Policy,
    /// Verification episodes.
    pub episodes: usize,
    /// Cloud model invocations: one per prefix token, one per
    /// verification episode, one per plainly generated token.
    pub cloud_calls: usize,
    pub device_accepts: usize,
    pub cloud_tokens: usize,
    /// Cloud-produced tokens over `seq_len`.
    pub cloud_call_rate: f64,
    pub steps: usize,
    pub gate: GateStats,
    /// Mean over positions of `KL(cloud || producer)`, where the producer is
    /// the distribution that emitted the token.
    pub mean_kl: f64,
}

/// Result of decoding one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub tokens: Vec<usize>,
    pub trace: DecodeTrace,
    pub metrics: EpisodeMetrics,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_arithmetic() {
        let cfg = DecodeConfig {
            rho: 0.06,
            seq_len: 256,
            ..DecodeConfig::default()
        };
        assert_eq!(cfg.prefix_len(), 15);
        let full = DecodeConfig { rho: 1.0, ..cfg.clone() };
        assert_eq!(full.prefix_len(), 256);
    }

    #[test]
    fn config_validation() {
        assert!(DecodeConfig::default().validate().is_ok());
        for bad in [
            DecodeConfig { k: 0, ..DecodeConfig::default() },
            DecodeConfig { rho: 1.5, ..DecodeConfig::default() },
            DecodeConfig { tau: -0.1, ..DecodeConfig::default() },
            DecodeConfig { tau: f64::NAN, ..DecodeConfig::default() },
            DecodeConfig {
                threshold_policy: ThresholdPolicy::RollingQuantile { q: 0.0, window: 4 },
                ..DecodeConfig::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn tau_accepts_inf() {
        let cfg: DecodeConfig = serde_json::from_str(r#"{"tau": "inf", "K": 3}"#).unwrap();
        assert!(cfg.tau.is_infinite());
        assert_eq!(cfg.k, 3);
        let back = serde_json::to_value(&cfg).unwrap();
        assert_eq!(back["tau"], "inf");
        let grid: Vec<Tau> = serde_json::from_str(r#"[0.1, "inf"]"#).unwrap();
        assert_eq!(grid[0].0, 0.1);
        assert!(grid[1].0.is_infinite());
        assert!(serde_json::from_str::<Tau>(r#""big""#).is_err());
    }

    #[test]
    fn threshold_policy_json() {
        let p: ThresholdPolicy =
            serde_json::from_str(r#"{"kind": "rolling_quantile", "q": 0.8, "window": 16}"#).unwrap();
        assert_eq!(p, ThresholdPolicy::RollingQuantile { q: 0.8, window: 16 });
        let s: ThresholdPolicy = serde_json::from_str(r#"{"kind": "static"}"#).unwrap();
        assert_eq!(s, ThresholdPolicy::Static);
    }
}
