//! Communication and compute cost of a decoded episode.
//!
//! A single transfer costs `rtt + bits / bandwidth`. Every verification
//! episode pays one uplink transfer (buffered tokens plus their interval
//! features) and one downlink transfer (the tokens the cloud emits).
//! Prefix and pure-cloud generation pay a downlink transfer only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoder::{CallKind, DecodeTrace};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkProfile {
    pub bandwidth_mbps: f64,
    pub rtt_ms: f64,
}

impl NetworkProfile {
    pub fn new(bandwidth_mbps: f64, rtt_ms: f64) -> Result<Self> {
        let p = Self {
            bandwidth_mbps,
            rtt_ms,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_mbps.is_finite() && self.bandwidth_mbps > 0.0) {
            return Err(invalid("bandwidth_mbps must be positive"));
        }
        if !(self.rtt_ms.is_finite() && self.rtt_ms >= 0.0) {
            return Err(invalid("rtt_ms must be nonnegative"));
        }
        Ok(())
    }
}

/// The 5G, 4G and WiFi settings.
pub fn builtin_profiles() -> BTreeMap<&'static str, NetworkProfile> {
    BTreeMap::from([
        ("5G", NetworkProfile { bandwidth_mbps: 300.0, rtt_ms: 10.0 }),
        ("4G", NetworkProfile { bandwidth_mbps: 20.0, rtt_ms: 50.0 }),
        ("WiFi", NetworkProfile { bandwidth_mbps: 100.0, rtt_ms: 20.0 }),
    ])
}

pub fn profile_by_name(name: &str) -> Option<NetworkProfile> {
    builtin_profiles().get(name).copied()
}

/// Bits on the wire per transferred item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PayloadModel {
    pub bits_per_token_up: f64,
    pub bits_per_token_down: f64,
    /// One interval feature travels with each uplinked token.
    pub bits_per_feature: f64,
    pub bits_fixed_per_call: f64,
}

impl Default for PayloadModel {
    fn default() -> Self {
        Self::for_hidden_dim(32)
    }
}

impl PayloadModel {
    /// 32-bit tokens, a `d`-float32 feature, 512 bits of framing.
    pub fn for_hidden_dim(d: usize) -> Self {
        Self {
            bits_per_token_up: 32.0,
            bits_per_token_down: 32.0,
            bits_per_feature: 32.0 * d as f64,
            bits_fixed_per_call: 512.0,
        }
    }

    pub fn zero() -> Self {
        Self {
            bits_per_token_up: 0.0,
            bits_per_token_down: 0.0,
            bits_per_feature: 0.0,
            bits_fixed_per_call: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.bits_per_token_up,
            self.bits_per_token_down,
            self.bits_per_feature,
            self.bits_fixed_per_call,
        ];
        if fields.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(invalid("payload sizes must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn uplink_bits(&self, tokens: usize) -> f64 {
        self.bits_fixed_per_call + tokens as f64 * (self.bits_per_token_up + self.bits_per_feature)
    }

    pub fn downlink_bits(&self, tokens: usize) -> f64 {
        self.bits_fixed_per_call + tokens as f64 * self.bits_per_token_down
    }
}

/// Per-step compute latency on each side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComputeCost {
    pub device_ms_per_step: f64,
    pub cloud_ms_per_step: f64,
}

impl Default for ComputeCost {
    fn default() -> Self {
        Self {
            device_ms_per_step: 0.05,
            cloud_ms_per_step: 20.0,
        }
    }
}

impl ComputeCost {
    pub fn validate(&self) -> Result<()> {
        if [self.device_ms_per_step, self.cloud_ms_per_step]
            .iter()
            .any(|x| !(x.is_finite() && *x >= 0.0))
        {
            return Err(invalid("compute costs must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub device_ms: f64,
    pub cloud_ms: f64,
    pub comm_up_ms: f64,
    pub comm_down_ms: f64,
    pub total_ms: f64,
    pub comm_ratio: f64,
}

impl LatencyReport {
    pub fn comm_ms(&self) -> f64 {
        self.comm_up_ms + self.comm_down_ms
    }
}

/// Latency of one transfer in milliseconds.
pub fn t_comm(profile: &NetworkProfile, data_bits: f64) -> Result<f64> {
    if data_bits.is_nan() || data_bits < 0.0 {
        return Err(invalid(format!("data size must be nonnegative, got {data_bits}")));
    }
    Ok(profile.rtt_ms + 1000.0 * data_bits / (profile.bandwidth_mbps * 1e6))
}

pub fn episode_latency(
    trace: &DecodeTrace,
    profile: &NetworkProfile,
    payload: &PayloadModel,
    compute: &ComputeCost,
) -> Result<LatencyReport> {
    profile.validate()?;
    payload.validate()?;
    compute.validate()?;
    let mut comm_up_ms = 0.0;
    let mut comm_down_ms = 0.0;
    for call in &trace.calls {
        if call.kind == CallKind::Verify {
            comm_up_ms += t_comm(profile, payload.uplink_bits(call.tokens_up))?;
        }
        comm_down_ms += t_comm(profile, payload.downlink_bits(call.tokens_down))?;
    }
    let device_ms = trace.device_steps as f64 * compute.device_ms_per_step;
    let cloud_ms = trace.cloud_steps as f64 * compute.cloud_ms_per_step;
    let total_ms = device_ms + cloud_ms + comm_up_ms + comm_down_ms;
    let comm_ratio = if total_ms > 0.0 {
        (comm_up_ms + comm_down_ms) / total_ms
    } else {
        0.0
    };
    Ok(LatencyReport {
        device_ms,
        cloud_ms,
        comm_up_ms,
        comm_down_ms,
        total_ms,
        comm_ratio,
    })
}
