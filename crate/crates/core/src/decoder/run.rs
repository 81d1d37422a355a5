use ndarray::ArrayView1;

use crate::error::{check_len, invalid, Error, Result};
use crate::interval::{inter_fuse, uncertainty_score, widths, FuseConfig, ProbIntervalVec};
use crate::math::{argmax, kl_divergence, softmax};
use crate::netsim::PayloadModel;
use crate::toy::{inter_head_forward, InterHeadParams, ModelParams, ToyWorld, SUMMARY_LEN, SUMMARY_TOP_WIDTHS};

use super::{
    CallKind, CloudCall, DecodeConfig, DecodeTrace, Episode, EpisodeMetrics, FeatureMode, GateStats, Origin,
    Policy, ThresholdPolicy, TraceRecord,
};

/// A device proposal waiting for verification.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferedToken {
    pub token: usize,
    pub hidden: Vec<f64>,
    pub interval: ProbIntervalVec,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    /// Length of the accepted prefix of the buffer.
    pub accepted: usize,
    /// Cloud token emitted after the accepted prefix, if any position is
    /// left.
    pub resampled: Option<usize>,
    /// Cloud logits at each position the cloud evaluated, in order.
    pub cloud_logits: Vec<Vec<f64>>,
}

/// Deferral rule: strictly above the threshold goes to the cloud.
pub fn gate_defers(score: f64, threshold: f64) -> bool {
    score > threshold
}

/// Nearest-rank `q`-quantile of the last `window` entries of `history`.
pub fn dynamic_threshold(history: &[f64], q: f64, window: usize) -> Option<f64> {
    let w = window.min(history.len());
    if w == 0 {
        return None;
    }
    let mut tail = history[history.len() - w..].to_vec();
    tail.sort_by(f64::total_cmp);
    let rank = ((q * w as f64).ceil() as usize).clamp(1, w);
    Some(tail[rank - 1])
}

/// Projects the device hidden state and its probability interval into the
/// cloud's embedding space.
pub fn interval_feature(
    params: &ModelParams,
    hidden: &[f64],
    interval: &ProbIntervalVec,
    mode: FeatureMode,
) -> Result<Vec<f64>> {
    let (n, d) = (params.vocab_size, params.hidden_dim);
    check_len("device hidden state", d, hidden.len())?;
    check_len("probability interval", n, interval.len())?;
    let x: Vec<f64> = match mode {
        FeatureMode::Full => hidden
            .iter()
            .chain(interval.lower())
            .chain(interval.upper())
            .copied()
            .collect(),
        FeatureMode::Summary => {
            let u = uncertainty_score(interval);
            let mut w = widths(interval);
            w.sort_by(|a, b| b.total_cmp(a));
            w.resize(SUMMARY_TOP_WIDTHS, 0.0);
            let mut x = Vec::with_capacity(d + SUMMARY_LEN);
            x.extend_from_slice(hidden);
            x.extend([u.omega, u.sigma, u.score]);
            x.extend(w);
            x
        }
    };
    let phi = match mode {
        FeatureMode::Full => &params.phi,
        FeatureMode::Summary => &params.phi_summary,
    };
    let f = phi.dot(&ArrayView1::from(&x));
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("interval feature"));
    }
    Ok(f.to_vec())
}

/// Greedy-match verification of a device buffer starting at
/// `context.len()`.
///
/// Position `i` of the buffer is scored with the interval feature of
/// buffered token `i`. The first mismatch is replaced by the cloud argmax;
/// if everything matches, one extra cloud token is produced using the last
/// buffered feature.
pub fn verify_buffer(
    world: &ToyWorld<'_>,
    context: &[usize],
    buffered: &[BufferedToken],
    mode: FeatureMode,
) -> Result<Verification> {
    if buffered.is_empty() {
        return Err(invalid("verification buffer is empty"));
    }
    let start = context.len();
    if start + buffered.len() > world.seq_len() {
        return Err(invalid("verification buffer runs past the end of the sequence"));
    }
    let mut ctx = context.to_vec();
    let mut cloud_logits = Vec::with_capacity(buffered.len() + 1);
    let mut last_feature = Vec::new();
    for (i, b) in buffered.iter().enumerate() {
        let feature = interval_feature(world.params, &b.hidden, &b.interval, mode)?;
        let logits = world.cloud_logits_with_feature(&ctx, start + i, Some(&feature))?;
        let best = argmax(&logits);
        cloud_logits.push(logits);
        if best != b.token {
            return Ok(Verification {
                accepted: i,
                resampled: Some(best),
                cloud_logits,
            });
        }
        ctx.push(b.token);
        last_feature = feature;
    }
    let end = start + buffered.len();
    let resampled = if end < world.seq_len() {
        let logits = world.cloud_logits_with_feature(&ctx, end, Some(&last_feature))?;
        let best = argmax(&logits);
        cloud_logits.push(logits);
        Some(best)
    } else {
        None
    };
    Ok(Verification {
        accepted: buffered.len(),
        resampled,
        cloud_logits,
    })
}

struct DeviceEval {
    token: usize,
    logits: Vec<f64>,
    hidden: Vec<f64>,
    interval: ProbIntervalVec,
    score: f64,
}

impl DeviceEval {
    fn new(
        world: &ToyWorld<'_>,
        head: &InterHeadParams,
        fuse: &FuseConfig,
        context: &[usize],
        pos: usize,
    ) -> Result<Self> {
        let state = world.device_state(context, pos)?;
        let iv = inter_head_forward(head, &state.head_input(), fuse.radius_clamp_max)?;
        let interval = inter_fuse(&iv, fuse)?;
        let score = uncertainty_score(&interval).score;
        Ok(Self {
            token: state.token(),
            logits: state.logits,
            hidden: state.hidden,
            interval,
            score,
        })
    }

    fn buffered(&self) -> BufferedToken {
        BufferedToken {
            token: self.token,
            hidden: self.hidden.clone(),
            interval: self.interval.clone(),
            uncertainty: self.score,
        }
    }
}

struct ThresholdTracker {
    tau: f64,
    policy: ThresholdPolicy,
    history: Vec<f64>,
}

impl ThresholdTracker {
    fn new(cfg: &DecodeConfig) -> Self {
        Self {
            tau: cfg.tau,
            policy: cfg.threshold_policy,
            history: Vec::new(),
        }
    }

    fn current(&self) -> f64 {
        match self.policy {
            ThresholdPolicy::Static => self.tau,
            ThresholdPolicy::RollingQuantile { q, window } => {
                if self.history.len() < window {
                    self.tau
                } else {
                    dynamic_threshold(&self.history, q, window).unwrap_or(self.tau)
                }
            }
        }
    }
}

/// Accumulates tokens, trace records and path divergence.
struct EpisodeBuilder<'a, 'p> {
    world: &'a ToyWorld<'p>,
    policy: Policy,
    payload: PayloadModel,
    tokens: Vec<usize>,
    trace: DecodeTrace,
    gate: GateStats,
    kl_sum: f64,
}

impl<'a, 'p> EpisodeBuilder<'a, 'p> {
    fn new(world: &'a ToyWorld<'p>, policy: Policy, payload: PayloadModel) -> Self {
        Self {
            world,
            policy,
            payload,
            tokens: Vec::with_capacity(world.seq_len()),
            trace: DecodeTrace::default(),
            gate: GateStats::default(),
            kl_sum: 0.0,
        }
    }

    fn pos(&self) -> usize {
        self.tokens.len()
    }

    /// Appends a token; `producer` is the distribution it was drawn from,
    /// `None` when that is the plain cloud.
    fn push(&mut self, token: usize, origin: Origin, uncertainty: Option<f64>, producer: Option<&[f64]>) -> Result<()> {
        let pos = self.pos();
        if let Some(logits) = producer {
            let reference = self.world.cloud_distribution(&self.tokens, pos)?;
            self.kl_sum += kl_divergence(&reference, &softmax(logits));
        }
        self.trace.records.push(TraceRecord {
            pos,
            token,
            origin,
            uncertainty,
            boundary: self.world.grid.is_boundary(pos),
            uplink_bits: 0.0,
            downlink_bits: 0.0,
        });
        self.tokens.push(token);
        Ok(())
    }

    fn call(&mut self, start: usize, kind: CallKind, tokens_up: usize, tokens_down: usize) {
        self.trace.calls.push(CloudCall {
            start,
            kind,
            tokens_up,
            tokens_down,
        });
        let rec = &mut self.trace.records[start];
        if kind == CallKind::Verify {
            rec.uplink_bits += self.payload.uplink_bits(tokens_up);
        }
        rec.downlink_bits += self.payload.downlink_bits(tokens_down);
    }

    /// Plain cloud greedy generation of `count` tokens as one downlink call.
    fn cloud_block(&mut self, count: usize, origin: Origin, kind: CallKind) -> Result<()> {
        if count == 0 {
            return Ok(());
        }
        let start = self.pos();
        for _ in 0..count {
            let logits = self.world.cloud_logits(&self.tokens, self.pos())?;
            self.push(argmax(&logits), origin, None, None)?;
            self.trace.cloud_steps += 1;
        }
        self.call(start, kind, 0, count);
        Ok(())
    }

    fn finish(self) -> Result<Episode> {
        let n = self.world.seq_len();
        let trace = self.trace;
        if trace.records.len() != n || trace.records.iter().enumerate().any(|(i, r)| r.pos != i) {
            return Err(Error::Internal(format!(
                "trace covers {} of {n} positions",
                trace.records.len()
            )));
        }
        let cloud_tokens = trace.records.iter().filter(|r| r.origin.is_cloud()).count();
        let device_accepts = n - cloud_tokens;
        let metrics = EpisodeMetrics {
            policy: self.policy,
            episodes: trace.episodes(),
            cloud_calls: trace.cloud_steps,
            device_accepts,
            cloud_tokens,
            cloud_call_rate: cloud_tokens as f64 / n as f64,
            steps: trace.device_steps + trace.cloud_steps,
            gate: self.gate,
            mean_kl: self.kl_sum / n as f64,
        };
        Ok(Episode {
            tokens: self.tokens,
            trace,
            metrics,
        })
    }
}

fn check_inputs(cfg: &DecodeConfig, world: &ToyWorld<'_>, head: Option<&InterHeadParams>) -> Result<()> {
    cfg.validate()?;
    check_len("seq_len", world.seq_len(), cfg.seq_len)?;
    if let Some(h) = head {
        check_len("inter-head vocabulary", world.vocab_size(), h.vocab_size())?;
        check_len("inter-head input", world.params.head_input_dim(), h.input_dim())?;
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Gate {
    Uncertainty,
    Always,
}

fn collaborative(
    cfg: &DecodeConfig,
    world: &ToyWorld<'_>,
    head: &InterHeadParams,
    gate: Gate,
    policy: Policy,
) -> Result<Episode> {
    check_inputs(cfg, world, Some(head))?;
    let n = world.seq_len();
    let mut ep = EpisodeBuilder::new(world, policy, cfg.payload);
    ep.cloud_block(cfg.prefix_len(), Origin::Prefix, CallKind::Prefix)?;
    let mut thresholds = ThresholdTracker::new(cfg);

    while ep.pos() < n {
        let t = ep.pos();
        let first = DeviceEval::new(world, head, &cfg.fuse, &ep.tokens, t)?;
        ep.trace.device_steps += 1;
        let defer = match gate {
            Gate::Always => true,
            Gate::Uncertainty => gate_defers(first.score, thresholds.current()),
        };
        thresholds.history.push(first.score);
        ep.gate.record(world.grid.is_boundary(t), defer);

        if !defer {
            ep.push(first.token, Origin::Device, Some(first.score), Some(&first.logits))?;
            continue;
        }

        // Fill the buffer with further device proposals.
        let mut ctx = ep.tokens.clone();
        ctx.push(first.token);
        let mut evals = vec![first];
        while evals.len() < cfg.k && t + evals.len() < n {
            let e = DeviceEval::new(world, head, &cfg.fuse, &ctx, t + evals.len())?;
            ep.trace.device_steps += 1;
            ctx.push(e.token);
            evals.push(e);
        }
        let buffered: Vec<BufferedToken> = evals.iter().map(DeviceEval::buffered).collect();
        let v = verify_buffer(world, &ep.tokens, &buffered, cfg.feature_mode)?;
        ep.trace.cloud_steps += 1;

        for (e, logits) in evals.iter().zip(&v.cloud_logits).take(v.accepted) {
            ep.push(e.token, Origin::CloudVerified, Some(e.score), Some(logits))?;
        }
        let mut emitted = v.accepted;
        if let Some(tok) = v.resampled {
            let score = evals.get(v.accepted).map(|e| e.score);
            ep.push(tok, Origin::CloudResampled, score, Some(&v.cloud_logits[v.accepted]))?;
            emitted += 1;
        }
        ep.call(t, CallKind::Verify, buffered.len(), emitted);
    }
    ep.finish()
}

/// Uncertainty-gated collaborative decoding.
pub fn run_ciar(cfg: &DecodeConfig, world: &ToyWorld<'_>, head: &InterHeadParams) -> Result<Episode> {
    collaborative(cfg, world, head, Gate::Uncertainty, Policy::Ciar)
}

/// Same loop with every device proposal deferred.
pub fn run_uniform_verification(
    cfg: &DecodeConfig,
    world: &ToyWorld<'_>,
    head: &InterHeadParams,
) -> Result<Episode> {
    collaborative(cfg, world, head, Gate::Always, Policy::Uniform)
}

/// Cloud greedy for the whole sequence.
pub fn run_baseline_cloud(cfg: &DecodeConfig, world: &ToyWorld<'_>) -> Result<Episode> {
    run_split(cfg, world, None, 1.0, Policy::BaseCloud)
}

/// Device greedy for the whole sequence. With a head, gate scores are
/// recorded for inspection.
pub fn run_baseline_device(
    cfg: &DecodeConfig,
    world: &ToyWorld<'_>,
    head: Option<&InterHeadParams>,
) -> Result<Episode> {
    run_split(cfg, world, head, 0.0, Policy::BaseDevice)
}

/// First `floor(split * seq_len)` tokens from the cloud, the rest from the
/// device.
pub fn run_fixed_split(
    cfg: &DecodeConfig,
    world: &ToyWorld<'_>,
    head: Option<&InterHeadParams>,
    split: f64,
) -> Result<Episode> {
    if !(0.0..=1.0).contains(&split) {
        return Err(invalid(format!("split must lie in [0, 1], got {split}")));
    }
    run_split(cfg, world, head, split, Policy::FixedSplit(split))
}

fn run_split(
    cfg: &DecodeConfig,
    world: &ToyWorld<'_>,
    head: Option<&InterHeadParams>,
    split: f64,
    policy: Policy,
) -> Result<Episode> {
    check_inputs(cfg, world, head)?;
    let n = world.seq_len();
    let cloud = ((split * n as f64).floor() as usize).min(n);
    let mut ep = EpisodeBuilder::new(world, policy, cfg.payload);
    ep.cloud_block(cloud, Origin::CloudVerified, CallKind::Generate)?;
    while ep.pos() < n {
        let t = ep.pos();
        let state = world.device_state(&ep.tokens, t)?;
        let score = match head {
            Some(h) => {
                let iv = inter_head_forward(h, &state.head_input(), cfg.fuse.radius_clamp_max)?;
                Some(uncertainty_score(&inter_fuse(&iv, &cfg.fuse)?).score)
            }
            None => None,
        };
        ep.trace.device_steps += 1;
        ep.push(state.token(), Origin::Device, score, Some(&state.logits))?;
    }
    ep.finish()
}

/// Dispatches on `policy`. Gated policies need a head.
pub fn run_policy(
    policy: Policy,
    cfg: &DecodeConfig,
    world: &ToyWorld<'_>,
    head: Option<&InterHeadParams>,
) -> Result<Episode> {
    let need_head = || head.ok_or_else(|| invalid(format!("policy {policy} needs an inter-head")));
    match policy {
        Policy::Ciar => run_ciar(cfg, world, need_head()?),
        Policy::Uniform => run_uniform_verification(cfg, world, need_head()?),
        Policy::BaseCloud => run_baseline_cloud(cfg, world),
        Policy::BaseDevice => run_baseline_device(cfg, world, head),
        Policy::FixedSplit(s) => run_fixed_split(cfg, world, head, s),
    }
}
