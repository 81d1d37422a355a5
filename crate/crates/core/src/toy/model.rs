use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Result};
use crate::math::{keyed_rng, softmax};

use super::scene::{generate_scene, SceneSpec, TokenGrid};

/// Number of trailing context tokens summarised by the toy decoders.
pub const CONTEXT_WINDOW: usize = 4;
/// Weight of the context-dependent term in every logit vector.
pub const CONTEXT_MIX: f64 = 0.1;
/// Scale of the seeded per-position offset added to device hidden states.
pub const POSITION_OFFSET_SCALE: f64 = 0.1;
/// Length of the width summary used by the compact interval feature.
pub const SUMMARY_TOP_WIDTHS: usize = 8;
pub const SUMMARY_LEN: usize = 3 + SUMMARY_TOP_WIDTHS;

const PARAM_STREAM: u64 = 0xA11CE;
const POSITION_STREAM: u64 = 0x9051;
const CLOUD_NOISE_STREAM: u64 = 0xC10D;
const DEVICE_NOISE_STREAM: u64 = 0xDE71;

/// Weights of the toy cloud and device models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    /// Codebook, one `hidden_dim` row per token.
    pub embed_table: Array2<f64>,
    pub w_dec_cloud: Array2<f64>,
    pub w_dec_device: Array2<f64>,
    pub readout_cloud: Array2<f64>,
    pub readout_device: Array2<f64>,
    /// Interval-feature projection, `d x (d + 2n)`.
    pub phi: Array2<f64>,
    /// Compact interval-feature projection, `d x (d + 11)`.
    pub phi_summary: Array2<f64>,
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| std * rng.sample::<f64, _>(StandardNormal))
}

impl ModelParams {
    /// Independent cloud and device weights.
    pub fn generate(vocab_size: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        if vocab_size < 2 || hidden_dim == 0 {
            return Err(invalid("model needs n >= 2 and d >= 1"));
        }
        let (n, d) = (vocab_size, hidden_dim);
        let mut rng = keyed_rng(seed, PARAM_STREAM, 0);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        Ok(Self {
            vocab_size: n,
            hidden_dim: d,
            seed,
            embed_table: gaussian(&mut rng, n, d, inv_sqrt_d),
            w_dec_cloud: gaussian(&mut rng, d, d, 1.0),
            w_dec_device: gaussian(&mut rng, d, d, 1.0),
            readout_cloud: gaussian(&mut rng, n, d, inv_sqrt_d),
            readout_device: gaussian(&mut rng, n, d, inv_sqrt_d),
            phi: gaussian(&mut rng, d, d + 2 * n, 1.0 / ((d + 2 * n) as f64).sqrt()),
            phi_summary: gaussian(&mut rng, d, d + SUMMARY_LEN, 1.0 / ((d + SUMMARY_LEN) as f64).sqrt()),
        })
    }

    /// Device decoder and readout identical to the cloud's.
    pub fn generate_shared(vocab_size: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        let mut p = Self::generate(vocab_size, hidden_dim, seed)?;
        p.w_dec_device = p.w_dec_cloud.clone();
        p.readout_device = p.readout_cloud.clone();
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.vocab_size, self.hidden_dim);
        let shapes = [
            ("embed_table", self.embed_table.dim(), (n, d)),
            ("w_dec_cloud", self.w_dec_cloud.dim(), (d, d)),
            ("w_dec_device", self.w_dec_device.dim(), (d, d)),
            ("readout_cloud", self.readout_cloud.dim(), (n, d)),
            ("readout_device", self.readout_device.dim(), (n, d)),
            ("phi", self.phi.dim(), (d, d + 2 * n)),
            ("phi_summary", self.phi_summary.dim(), (d, d + SUMMARY_LEN)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(invalid(format!("{name} has shape {got:?}, expected {want:?}")));
            }
        }
        let all = [
            &self.embed_table,
            &self.w_dec_cloud,
            &self.w_dec_device,
            &self.readout_cloud,
            &self.readout_device,
            &self.phi,
            &self.phi_summary,
        ];
        if all.iter().any(|m| m.iter().any(|x| !x.is_finite())) {
            return Err(crate::Error::NonFinite("model parameters"));
        }
        Ok(())
    }

    /// Input dimension of an Inter-Head over [`DeviceState::head_input`].
    pub fn head_input_dim(&self) -> usize {
        self.vocab_size + self.hidden_dim
    }
}

/// Codebook lookup.
pub fn embed(params: &ModelParams, token: usize) -> Result<ArrayView1<'_, f64>> {
    if token >= params.vocab_size {
        return Err(invalid(format!(
            "token {token} outside vocabulary of {}",
            params.vocab_size
        )));
    }
    Ok(params.embed_table.row(token))
}

/// Mean embedding of the last [`CONTEXT_WINDOW`] tokens; zero when empty.
pub fn context_summary(params: &ModelParams, context: &[usize]) -> Result<Array1<f64>> {
    let tail = &context[context.len().saturating_sub(CONTEXT_WINDOW)..];
    let mut acc = Array1::zeros(params.hidden_dim);
    for &t in tail {
        acc += &embed(params, t)?;
    }
    if !tail.is_empty() {
        acc /= tail.len() as f64;
    }
    Ok(acc)
}

fn position_offset(params: &ModelParams, pos: usize) -> Array1<f64> {
    let mut rng = keyed_rng(params.seed, POSITION_STREAM, pos as u64);
    Array1::from_shape_fn(params.hidden_dim, |_| {
        POSITION_OFFSET_SCALE * rng.sample::<f64, _>(StandardNormal)
    })
}

/// Device hidden state `tanh(W_dev * summary(context)) + offset(pos)`.
pub fn device_hidden(params: &ModelParams, context: &[usize], pos: usize) -> Result<Vec<f64>> {
    check_len("context", pos, context.len())?;
    let summary = context_summary(params, context)?;
    let h = params.w_dec_device.dot(&summary).mapv(f64::tanh) + position_offset(params, pos);
    Ok(h.to_vec())
}

/// One cloud decoder step on `embedding + feature`; returns
/// `(hidden, logits)`.
pub fn cloud_decoder_step(
    params: &ModelParams,
    token_embedding: &[f64],
    interval_feature: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = params.hidden_dim;
    check_len("token embedding", d, token_embedding.len())?;
    let mut input = Array1::from(token_embedding.to_vec());
    if let Some(f) = interval_feature {
        check_len("interval feature", d, f.len())?;
        input += &ArrayView1::from(f);
    }
    let hidden = params.w_dec_cloud.dot(&input).mapv(f64::tanh);
    let logits = params.readout_cloud.dot(&hidden);
    Ok((hidden.to_vec(), logits.to_vec()))
}

/// Everything the device computes at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub logits: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl DeviceState {
    /// Greedy device token.
    pub fn token(&self) -> usize {
        crate::math::argmax(&self.logits)
    }

    /// Inter-Head input: device logits followed by the hidden state.
    pub fn head_input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.logits.len() + self.hidden.len());
        x.extend_from_slice(&self.logits);
        x.extend_from_slice(&self.hidden);
        x
    }
}

/// A scene plus the models that decode it.
#[derive(Debug, Clone)]
pub struct ToyWorld<'p> {
    pub spec: SceneSpec,
    pub grid: TokenGrid,
    pub params: &'p ModelParams,
}

impl<'p> ToyWorld<'p> {
    pub fn new(spec: SceneSpec, params: &'p ModelParams) -> Result<Self> {
        check_len("scene vocabulary", params.vocab_size, spec.vocab_size)?;
        let grid = generate_scene(&spec)?;
        Ok(Self { spec, grid, params })
    }

    pub fn seq_len(&self) -> usize {
        self.grid.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.params.vocab_size
    }

    fn check_pos(&self, context: &[usize], pos: usize) -> Result<()> {
        if pos >= self.seq_len() {
            return Err(invalid(format!(
                "position {pos} outside sequence of length {}",
                self.seq_len()
            )));
        }
        check_len("context", pos, context.len())
    }

    fn noise(&self, pos: usize, stream: u64, scale: f64) -> Vec<f64> {
        let n = self.vocab_size();
        if scale == 0.0 {
            return vec![0.0; n];
        }
        let mut rng = keyed_rng(self.spec.seed, stream, pos as u64);
        (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Ground-truth signal plus the cloud's own noise at `pos`.
    fn anchored_logits(&self, pos: usize) -> Vec<f64> {
        let scale = if self.grid.is_boundary(pos) {
            0.5 * self.spec.boundary_noise
        } else {
            self.spec.interior_noise
        };
        let mut logits = self.noise(pos, CLOUD_NOISE_STREAM, scale);
        logits[self.grid.token(pos)] += 1.0 / self.spec.temperature;
        logits
    }

    /// Cloud next-token logits given the emitted prefix.
    pub fn cloud_logits(&self, context: &[usize], pos: usize) -> Result<Vec<f64>> {
        self.cloud_logits_with_feature(context, pos, None)
    }

    /// Cloud logits with an interval feature added to the decoder input.
    pub fn cloud_logits_with_feature(
        &self,
        context: &[usize],
        pos: usize,
        feature: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        self.check_pos(context, pos)?;
        let summary = context_summary(self.params, context)?;
        let (_, mix) = cloud_decoder_step(self.params, summary.as_slice().expect("contiguous"), feature)?;
        let mut logits = self.anchored_logits(pos);
        for (l, m) in logits.iter_mut().zip(mix) {
            *l += CONTEXT_MIX * m;
        }
        Ok(logits)
    }

    pub fn cloud_distribution(&self, context: &[usize], pos: usize) -> Result<Vec<f64>> {
        Ok(softmax(&self.cloud_logits(context, pos)?))
    }

    /// Device logits: the cloud's anchored logits, an extra perturbation
    /// and the device's own context term.
    pub fn device_logits(&self, context: &[usize], pos: usize) -> Result<Vec<f64>> {
        self.check_pos(context, pos)?;
        let scale = if self.grid.is_boundary(pos) {
            self.spec.boundary_noise
        } else {
            self.spec.interior_noise
        };
        let summary = context_summary(self.params, context)?;
        let hidden = self.params.w_dec_device.dot(&summary).mapv(f64::tanh);
        let mix = self.params.readout_device.dot(&hidden);
        let extra = self.noise(pos, DEVICE_NOISE_STREAM, scale);
        let mut logits = self.anchored_logits(pos);
        for ((l, e), m) in logits.iter_mut().zip(extra).zip(mix.iter()) {
            *l += e + CONTEXT_MIX * m;
        }
        Ok(logits)
    }

    pub fn device_hidden(&self, context: &[usize], pos: usize) -> Result<Vec<f64>> {
        self.check_pos(context, pos)?;
        device_hidden(self.params, context, pos)
    }

    pub fn device_state(&self, context: &[usize], pos: usize) -> Result<DeviceState> {
        Ok(DeviceState {
            logits: self.device_logits(context, pos)?,
            hidden: self.device_hidden(context, pos)?,
        })
    }
}
