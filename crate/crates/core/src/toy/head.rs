//! The Inter-Head: two linear maps giving center and radius logits.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::interval::LogitIntervalVec;
use crate::math::{keyed_rng, softplus};

use super::model::ModelParams;

/// Magic bytes opening a serialized Inter-Head.
pub const HEAD_MAGIC: &[u8; 8] = b"CIARIH1\0";

const HEAD_STREAM: u64 = 0x1E4D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterHeadParams {
    /// Center map, `n x input_dim`.
    pub w_c: Array2<f64>,
    pub b_c: Array1<f64>,
    /// Radius pre-activation map, `n x input_dim`.
    pub w_r: Array2<f64>,
    pub b_r: Array1<f64>,
}

/// Knobs for the hand-built head used by protocol tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticHeadConfig {
    /// Center = `center_gain * device_logits`.
    pub center_gain: f64,
    /// Radius when the hidden-state term vanishes.
    pub radius_base: f64,
    /// Std of the seeded hidden-to-radius weights.
    pub radius_spread: f64,
    pub seed: u64,
}

impl Default for AnalyticHeadConfig {
    fn default() -> Self {
        Self {
            center_gain: 2.0,
            radius_base: 2.0,
            radius_spread: 0.25,
            seed: 0,
        }
    }
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl InterHeadParams {
    pub fn zeros(vocab_size: usize, input_dim: usize) -> Self {
        Self {
            w_c: Array2::zeros((vocab_size, input_dim)),
            b_c: Array1::zeros(vocab_size),
            w_r: Array2::zeros((vocab_size, input_dim)),
            b_r: Array1::zeros(vocab_size),
        }
    }

    /// Small random weights with every radius starting near `radius_init`.
    pub fn init_random(vocab_size: usize, input_dim: usize, radius_init: f64, seed: u64) -> Self {
        let mut rng = keyed_rng(seed, HEAD_STREAM, 0);
        let std = 0.01;
        let mut head = Self::zeros(vocab_size, input_dim);
        head.w_c.mapv_inplace(|_| std * rng.sample::<f64, _>(StandardNormal));
        head.w_r.mapv_inplace(|_| std * rng.sample::<f64, _>(StandardNormal));
        head.b_r.fill(inverse_softplus(radius_init));
        head
    }

    /// Hand-built head over `[device_logits; hidden]`: the center is the
    /// scaled device logits and the radius a softplus of seeded weights on
    /// the hidden state.
    pub fn analytic(params: &ModelParams, cfg: &AnalyticHeadConfig) -> Self {
        let (n, d) = (params.vocab_size, params.hidden_dim);
        let mut head = Self::zeros(n, n + d);
        for i in 0..n {
            head.w_c[[i, i]] = cfg.center_gain;
        }
        let mut rng = keyed_rng(cfg.seed, HEAD_STREAM, 1);
        let std = cfg.radius_spread / (d as f64).sqrt();
        head.w_r
            .slice_mut(s![.., n..])
            .mapv_inplace(|_| std * rng.sample::<f64, _>(StandardNormal));
        head.b_r.fill(inverse_softplus(cfg.radius_base));
        head
    }

    pub fn vocab_size(&self) -> usize {
        self.b_c.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_c.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.vocab_size(), self.input_dim());
        if self.w_c.dim() != (n, d) || self.w_r.dim() != (n, d) || self.b_r.len() != n {
            return Err(invalid("inter-head parameter shapes disagree"));
        }
        let finite = self
            .w_c
            .iter()
            .chain(&self.b_c)
            .chain(&self.w_r)
            .chain(&self.b_r)
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("inter-head parameters"));
        }
        Ok(())
    }

    /// Serializes as magic, `n` and `d` (u32 LE), then `W_c`, `b_c`, `W_r`,
    /// `b_r` as f64 LE, matrices row-major.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let n = u32::try_from(self.vocab_size()).map_err(|_| invalid("n too large"))?;
        let d = u32::try_from(self.input_dim()).map_err(|_| invalid("d too large"))?;
        w.write_all(HEAD_MAGIC)?;
        w.write_all(&n.to_le_bytes())?;
        w.write_all(&d.to_le_bytes())?;
        for block in [
            self.w_c.iter().collect::<Vec<_>>(),
            self.b_c.iter().collect(),
            self.w_r.iter().collect(),
            self.b_r.iter().collect(),
        ] {
            for x in block {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated header".into()))?;
        if &magic != HEAD_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)
            .map_err(|_| Error::Format("truncated header".into()))?;
        let n = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)
            .map_err(|_| Error::Format("truncated header".into()))?;
        let d = u32::from_le_bytes(word) as usize;

        let mut read_vec = |len: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Format("truncated payload".into()))?;
                out.push(f64::from_le_bytes(buf));
            }
            Ok(out)
        };
        let shape_err = |_| Error::Format("inconsistent shape".into());
        let w_c = Array2::from_shape_vec((n, d), read_vec(n * d)?).map_err(shape_err)?;
        let b_c = Array1::from(read_vec(n)?);
        let w_r = Array2::from_shape_vec((n, d), read_vec(n * d)?).map_err(shape_err)?;
        let b_r = Array1::from(read_vec(n)?);
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        let head = Self { w_c, b_c, w_r, b_r };
        head.validate()?;
        Ok(head)
    }
}

/// Center and radius pre-activation for one input.
pub(crate) fn head_preactivations(ih: &InterHeadParams, input: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
    let center = ih.w_c.dot(&input) + &ih.b_c;
    let pre_radius = ih.w_r.dot(&input) + &ih.b_r;
    (center, pre_radius)
}

/// `center = W_c x + b_c`, `radius = min(softplus(W_r x + b_r), clamp)`.
pub fn inter_head_forward(
    ih: &InterHeadParams,
    input: &[f64],
    radius_clamp_max: f64,
) -> Result<LogitIntervalVec> {
    check_len("inter-head input", ih.input_dim(), input.len())?;
    let (center, pre) = head_preactivations(ih, ArrayView1::from(input));
    let radius = pre.mapv(|a| softplus(a).min(radius_clamp_max));
    LogitIntervalVec::new(center.to_vec(), radius.to_vec())
}
