use std::io::Write;

use serde::Serialize;

use crate::error::Result;

use super::{DecodeConfig, Episode, TraceRecord};

pub const METRICS_HEADER: [&str; 9] = [
    "seed",
    "policy",
    "tau",
    "rho",
    "K",
    "cloud_call_rate",
    "episodes",
    "steps",
    "device_accepts",
];

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub policy: String,
    pub tau: f64,
    pub rho: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub cloud_call_rate: f64,
    pub episodes: usize,
    pub steps: usize,
    pub device_accepts: usize,
}

impl MetricsRow {
    pub fn new(cfg: &DecodeConfig, episode: &Episode) -> Self {
        let m = &episode.metrics;
        Self {
            seed: cfg.seed,
            policy: m.policy.name().to_string(),
            tau: cfg.tau,
            rho: cfg.rho,
            k: cfg.k,
            cloud_call_rate: m.cloud_call_rate,
            episodes: m.episodes,
            steps: m.steps,
            device_accepts: m.device_accepts,
        }
    }
}

/// Writes the header and one line per row. Infinite thresholds print as
/// `inf`.
pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricsRow]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// One JSON object per record.
pub fn write_trace_jsonl<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
