//! Inter-DRO training of the linear Inter-Head.
//!
//! Bound distributions are plain softmaxes of `c - r`, `c` and `c + r`. The
//! loss is
//!
//! ```text
//! L = [anchor(p_mid) + lambda_beta * KL(q || p_mid)]
//!   + [anchor(p_up)]
//!   + [anchor(p_lo) + sum_n w_n CE(q_n, p_lo_n)]
//! ```
//!
//! with batch means on the anchor and KL terms and `w = softmax(alpha * CE)`
//! held constant when differentiating.

use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::math::{cross_entropy, keyed_rng, kl_divergence, l1_distance, sigmoid, softmax, softmax_in_place, softplus, LOG_EPS};
use crate::toy::{head_preactivations, InterHeadParams, ModelParams, SceneSpec, ToyWorld};

const HARVEST_STREAM: u64 = 0x4A57;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterDroConfig {
    pub lambda_v: f64,
    pub lambda_p: f64,
    pub lambda_beta: f64,
    /// DRO temperature.
    pub alpha: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Radius clamp used by the forward pass.
    pub radius_clamp_max: f64,
    /// Initial radius of a freshly initialised head.
    pub radius_init: f64,
    /// Number of (input, cloud distribution) pairs to harvest.
    pub dataset_size: usize,
}

impl Default for InterDroConfig {
    fn default() -> Self {
        Self {
            lambda_v: 1.0,
            lambda_p: 1.0,
            lambda_beta: 0.5,
            alpha: 1.0,
            learning_rate: 0.5,
            steps: 1000,
            batch_size: 256,
            seed: 0,
            radius_clamp_max: 10.0,
            radius_init: 0.5,
            dataset_size: 4096,
        }
    }
}

impl InterDroConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.lambda_v, self.lambda_p, self.lambda_beta, self.alpha];
        if nonneg.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(invalid("loss weights and alpha must be finite and nonnegative"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(invalid("learning_rate must be finite and nonnegative"));
        }
        if self.batch_size == 0 || self.dataset_size == 0 {
            return Err(invalid("batch_size and dataset_size must be positive"));
        }
        if !(self.radius_clamp_max.is_finite() && self.radius_clamp_max > 0.0) {
            return Err(invalid("radius_clamp_max must be positive"));
        }
        if !(self.radius_init.is_finite() && self.radius_init > 0.0) {
            return Err(invalid("radius_init must be positive"));
        }
        Ok(())
    }
}

/// Head inputs paired with the cloud distributions they should match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingBatch {
    /// `N x input_dim`, one Inter-Head input per row.
    pub inputs: Array2<f64>,
    /// `N x n`, one cloud distribution per row.
    pub cloud_dists: Array2<f64>,
}

impl TrainingBatch {
    pub fn new(inputs: Array2<f64>, cloud_dists: Array2<f64>) -> Result<Self> {
        let b = Self { inputs, cloud_dists };
        b.validate()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        check_len("batch rows", self.inputs.nrows(), self.cloud_dists.nrows())?;
        if self.is_empty() {
            return Err(invalid("empty training batch"));
        }
        if self.inputs.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("training inputs"));
        }
        for row in self.cloud_dists.rows() {
            if row.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(invalid("cloud distributions must be nonnegative"));
            }
            let s = row.sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("cloud distribution sums to {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_center: f64,
    pub l_upper: f64,
    pub l_lower: f64,
    pub l_dro: f64,
    /// Weighted KL term, already part of `l_center`.
    pub l_kl: f64,
    pub total: f64,
    /// Unweighted mean `KL(q || p_mid)`; not part of the loss.
    pub mean_kl: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.l_center += s * other.l_center;
        self.l_upper += s * other.l_upper;
        self.l_lower += s * other.l_lower;
        self.l_dro += s * other.l_dro;
        self.l_kl += s * other.l_kl;
        self.total += s * other.total;
        self.mean_kl += s * other.mean_kl;
    }
}

/// Lower, center and upper bound distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundDistributions {
    pub lower: Vec<f64>,
    pub mid: Vec<f64>,
    pub upper: Vec<f64>,
}

fn radius_of(pre: f64, clamp: f64) -> f64 {
    softplus(pre).min(clamp)
}

fn bounds_from(center: ArrayView1<f64>, pre: ArrayView1<f64>, clamp: f64) -> BoundDistributions {
    let r: Vec<f64> = pre.iter().map(|&a| radius_of(a, clamp)).collect();
    let mut lower: Vec<f64> = center.iter().zip(&r).map(|(c, r)| c - r).collect();
    let mut upper: Vec<f64> = center.iter().zip(&r).map(|(c, r)| c + r).collect();
    softmax_in_place(&mut lower);
    softmax_in_place(&mut upper);
    BoundDistributions {
        lower,
        mid: softmax(center.as_slice().expect("contiguous")),
        upper,
    }
}

/// `softmax(c - r)`, `softmax(c)`, `softmax(c + r)` for one input.
pub fn bound_distributions(ih: &InterHeadParams, input: &[f64], radius_clamp_max: f64) -> Result<BoundDistributions> {
    check_len("inter-head input", ih.input_dim(), input.len())?;
    let (c, a) = head_preactivations(ih, ArrayView1::from(input));
    Ok(bounds_from(c.view(), a.view(), radius_clamp_max))
}

/// `lambda_v * |p - q|_1 + lambda_p * CE(q, p)`.
pub fn anchor_loss(p: &[f64], p_cloud: &[f64], lambda_v: f64, lambda_p: f64) -> f64 {
    let mut l = 0.0;
    if lambda_v != 0.0 {
        l += lambda_v * l1_distance(p, p_cloud);
    }
    if lambda_p != 0.0 {
        l += lambda_p * cross_entropy(p_cloud, p);
    }
    l
}

/// `softmax(alpha * ce)`.
pub fn dro_weights(ce_losses: &[f64], alpha: f64) -> Vec<f64> {
    let scaled: Vec<f64> = ce_losses.iter().map(|&c| alpha * c).collect();
    softmax(&scaled)
}

pub fn dro_loss(ce_losses: &[f64], alpha: f64) -> f64 {
    dro_weights(ce_losses, alpha)
        .iter()
        .zip(ce_losses)
        .map(|(w, c)| w * c)
        .sum()
}

/// `KL(p_cloud || p_mid)`.
pub fn kl_align(p_cloud: &[f64], p_mid: &[f64]) -> f64 {
    kl_divergence(p_cloud, p_mid)
}

/// Differences below this are treated as exact matches, so the L1
/// subgradient is 0 at the kink even after rounding.
const L1_KINK: f64 = 1e-12;

fn anchor_grad(p: &[f64], q: &[f64], cfg: &InterDroConfig, scale: f64, out: &mut [f64]) {
    for ((o, &pi), &qi) in out.iter_mut().zip(p).zip(q) {
        let sign = if pi - qi > L1_KINK {
            1.0
        } else if qi - pi > L1_KINK {
            -1.0
        } else {
            0.0
        };
        *o += scale * (cfg.lambda_v * sign - cfg.lambda_p * qi / (pi + LOG_EPS));
    }
}

/// Pulls a gradient on a softmax output back to its logits.
fn softmax_backward(p: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(g).map(|(p, g)| p * g).sum();
    p.iter().zip(g).map(|(p, g)| p * (g - dot)).collect()
}

fn check_batch(ih: &InterHeadParams, batch: &TrainingBatch) -> Result<()> {
    check_len("batch inputs", ih.input_dim(), batch.inputs.ncols())?;
    check_len("batch distributions", ih.vocab_size(), batch.cloud_dists.ncols())?;
    check_len("batch rows", batch.inputs.nrows(), batch.cloud_dists.nrows())?;
    if batch.is_empty() {
        return Err(invalid("empty training batch"));
    }
    Ok(())
}

fn forward_all(ih: &InterHeadParams, inputs: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let c = inputs.dot(&ih.w_c.t()) + &ih.b_c;
    let a = inputs.dot(&ih.w_r.t()) + &ih.b_r;
    (c, a)
}

/// Loss and, optionally, its gradient on one batch.
fn evaluate(
    ih: &InterHeadParams,
    batch: &TrainingBatch,
    cfg: &InterDroConfig,
    want_grad: bool,
    frozen_weights: Option<&[f64]>,
) -> (LossBreakdown, Option<InterHeadParams>) {
    let nrows = batch.len();
    let inv = 1.0 / nrows as f64;
    let (c, a) = forward_all(ih, batch.inputs.view());
    let bounds: Vec<BoundDistributions> = (0..nrows)
        .map(|i| bounds_from(c.row(i), a.row(i), cfg.radius_clamp_max))
        .collect();
    let qs: Vec<&[f64]> = batch
        .cloud_dists
        .rows()
        .into_iter()
        .map(|r| r.to_slice().expect("row-major batch"))
        .collect();

    let ce_lo: Vec<f64> = bounds.iter().zip(&qs).map(|(b, q)| cross_entropy(q, &b.lower)).collect();
    let w = match frozen_weights {
        Some(w) => w.to_vec(),
        None => dro_weights(&ce_lo, cfg.alpha),
    };

    let mut loss = LossBreakdown::default();
    for (b, q) in bounds.iter().zip(&qs) {
        let kl = kl_align(q, &b.mid);
        loss.mean_kl += inv * kl;
        loss.l_kl += inv * cfg.lambda_beta * kl;
        loss.l_center += inv * anchor_loss(&b.mid, q, cfg.lambda_v, cfg.lambda_p);
        loss.l_upper += inv * anchor_loss(&b.upper, q, cfg.lambda_v, cfg.lambda_p);
        loss.l_lower += inv * anchor_loss(&b.lower, q, cfg.lambda_v, cfg.lambda_p);
    }
    loss.l_dro = w.iter().zip(&ce_lo).map(|(w, c)| w * c).sum();
    loss.l_center += loss.l_kl;
    loss.l_lower += loss.l_dro;
    loss.total = loss.l_center + loss.l_upper + loss.l_lower;

    if !want_grad {
        return (loss, None);
    }

    let n = ih.vocab_size();
    let mut dc = Array2::<f64>::zeros((nrows, n));
    let mut da = Array2::<f64>::zeros((nrows, n));
    for (i, (b, q)) in bounds.iter().zip(&qs).enumerate() {
        let mut g_mid = vec![0.0; n];
        let mut g_up = vec![0.0; n];
        let mut g_lo = vec![0.0; n];
        anchor_grad(&b.mid, q, cfg, inv, &mut g_mid);
        anchor_grad(&b.upper, q, cfg, inv, &mut g_up);
        anchor_grad(&b.lower, q, cfg, inv, &mut g_lo);
        for j in 0..n {
            g_mid[j] -= inv * cfg.lambda_beta * q[j] / (b.mid[j] + LOG_EPS);
            g_lo[j] -= w[i] * q[j] / (b.lower[j] + LOG_EPS);
        }
        let z_mid = softmax_backward(&b.mid, &g_mid);
        let z_up = softmax_backward(&b.upper, &g_up);
        let z_lo = softmax_backward(&b.lower, &g_lo);
        for j in 0..n {
            dc[[i, j]] = z_mid[j] + z_up[j] + z_lo[j];
            let pre = a[[i, j]];
            // The clamp zeroes the radius gradient.
            if softplus(pre) < cfg.radius_clamp_max {
                da[[i, j]] = (z_up[j] - z_lo[j]) * sigmoid(pre);
            }
        }
    }
    let grad = InterHeadParams {
        w_c: dc.t().dot(&batch.inputs),
        b_c: dc.sum_axis(Axis(0)),
        w_r: da.t().dot(&batch.inputs),
        b_r: da.sum_axis(Axis(0)),
    };
    (loss, Some(grad))
}

pub fn inter_dro_loss(ih: &InterHeadParams, batch: &TrainingBatch, cfg: &InterDroConfig) -> Result<LossBreakdown> {
    check_batch(ih, batch)?;
    Ok(evaluate(ih, batch, cfg, false, None).0)
}

/// Gradient of the total loss with respect to every head parameter, DRO
/// weights held fixed.
pub fn analytic_gradient(ih: &InterHeadParams, batch: &TrainingBatch, cfg: &InterDroConfig) -> Result<InterHeadParams> {
    check_batch(ih, batch)?;
    Ok(evaluate(ih, batch, cfg, true, None).1.expect("gradient requested"))
}

/// DRO weights of a batch at the current parameters.
pub fn batch_dro_weights(ih: &InterHeadParams, batch: &TrainingBatch, cfg: &InterDroConfig) -> Result<Vec<f64>> {
    check_batch(ih, batch)?;
    let (c, a) = forward_all(ih, batch.inputs.view());
    let ce: Vec<f64> = (0..batch.len())
        .map(|i| {
            let b = bounds_from(c.row(i), a.row(i), cfg.radius_clamp_max);
            cross_entropy(batch.cloud_dists.row(i).as_slice().expect("row-major batch"), &b.lower)
        })
        .collect();
    Ok(dro_weights(&ce, cfg.alpha))
}

/// Central differences of the total loss, one parameter at a time, with the
/// DRO weights frozen at their value at `ih`.
pub fn finite_difference_gradient(
    ih: &InterHeadParams,
    batch: &TrainingBatch,
    cfg: &InterDroConfig,
    step: f64,
) -> Result<InterHeadParams> {
    let w = batch_dro_weights(ih, batch, cfg)?;
    let mut probe = ih.clone();
    let mut grad = InterHeadParams::zeros(ih.vocab_size(), ih.input_dim());
    let mut diff = |get: &dyn Fn(&mut InterHeadParams) -> &mut f64| -> f64 {
        let orig = *get(&mut probe);
        *get(&mut probe) = orig + step;
        let plus = evaluate(&probe, batch, cfg, false, Some(&w)).0.total;
        *get(&mut probe) = orig - step;
        let minus = evaluate(&probe, batch, cfg, false, Some(&w)).0.total;
        *get(&mut probe) = orig;
        (plus - minus) / (2.0 * step)
    };
    let (n, d) = (ih.vocab_size(), ih.input_dim());
    for i in 0..n {
        for j in 0..d {
            grad.w_c[[i, j]] = diff(&|h| &mut h.w_c[[i, j]]);
            grad.w_r[[i, j]] = diff(&|h| &mut h.w_r[[i, j]]);
        }
        grad.b_c[i] = diff(&|h| &mut h.b_c[i]);
        grad.b_r[i] = diff(&|h| &mut h.b_r[i]);
    }
    Ok(grad)
}

/// Mean loss over batches and, optionally, the mean gradient. Batches are
/// evaluated in parallel and reduced in order.
fn dataset_eval(
    ih: &InterHeadParams,
    dataset: &[TrainingBatch],
    cfg: &InterDroConfig,
    want_grad: bool,
) -> (LossBreakdown, Option<InterHeadParams>) {
    let parts: Vec<_> = dataset
        .par_iter()
        .map(|b| evaluate(ih, b, cfg, want_grad, None))
        .collect();
    let s = 1.0 / dataset.len() as f64;
    let mut loss = LossBreakdown::default();
    let mut grad = want_grad.then(|| InterHeadParams::zeros(ih.vocab_size(), ih.input_dim()));
    for (l, g) in &parts {
        loss.add_scaled(l, s);
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.w_c.scaled_add(s, &g.w_c);
            acc.b_c.scaled_add(s, &g.b_c);
            acc.w_r.scaled_add(s, &g.w_r);
            acc.b_r.scaled_add(s, &g.b_r);
        }
    }
    (loss, grad)
}

/// Loss averaged over every batch of `dataset`.
pub fn dataset_loss(ih: &InterHeadParams, dataset: &[TrainingBatch], cfg: &InterDroConfig) -> Result<LossBreakdown> {
    if dataset.is_empty() {
        return Err(invalid("empty dataset"));
    }
    for b in dataset {
        check_batch(ih, b)?;
    }
    Ok(dataset_eval(ih, dataset, cfg, false).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss at the start of each step, before its update.
    pub history: Vec<LossBreakdown>,
    /// Loss after the last update.
    pub final_loss: LossBreakdown,
}

impl TrainReport {
    pub fn initial_kl(&self) -> f64 {
        self.history.first().map_or(self.final_loss.mean_kl, |l| l.mean_kl)
    }
}

/// Full-dataset gradient descent at a fixed learning rate.
pub fn train(
    ih_init: &InterHeadParams,
    dataset: &[TrainingBatch],
    cfg: &InterDroConfig,
) -> Result<(InterHeadParams, TrainReport)> {
    cfg.validate()?;
    ih_init.validate()?;
    if dataset.is_empty() {
        return Err(invalid("empty dataset"));
    }
    for b in dataset {
        check_batch(ih_init, b)?;
    }
    let mut ih = ih_init.clone();
    let lr = cfg.learning_rate;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (loss, grad) = dataset_eval(&ih, dataset, cfg, true);
        if !loss.total.is_finite() {
            return Err(Error::Diverged { step, loss: loss.total });
        }
        history.push(loss);
        let g = grad.expect("gradient requested");
        ih.w_c.scaled_add(-lr, &g.w_c);
        ih.b_c.scaled_add(-lr, &g.b_c);
        ih.w_r.scaled_add(-lr, &g.w_r);
        ih.b_r.scaled_add(-lr, &g.b_r);
    }
    let final_loss = dataset_eval(&ih, dataset, cfg, false).0;
    if !final_loss.total.is_finite() {
        return Err(Error::Diverged {
            step: cfg.steps,
            loss: final_loss.total,
        });
    }
    Ok((ih, TrainReport { history, final_loss }))
}

/// Added to the training seed to pick harvest scenes, keeping them apart
/// from the low seeds used for evaluation.
pub const TRAIN_SCENE_OFFSET: u64 = 1_000_000;

/// `(head input, cloud distribution)` pairs from teacher-forced scenes.
///
/// Scenes use seeds `seed, seed + 1, ...` until `pairs` positions are
/// collected; the pairs are shuffled and cut into batches of `batch_size`.
pub fn harvest_dataset(
    spec: &SceneSpec,
    params: &ModelParams,
    pairs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<TrainingBatch>> {
    if pairs == 0 || batch_size == 0 {
        return Err(invalid("pairs and batch_size must be positive"));
    }
    let mut rows: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(pairs);
    let mut scene = 0u64;
    while rows.len() < pairs {
        let world = ToyWorld::new(spec.with_seed(seed.wrapping_add(scene)), params)?;
        let truth = &world.grid.tokens;
        for pos in 0..world.seq_len() {
            if rows.len() == pairs {
                break;
            }
            let ctx = &truth[..pos];
            let input = world.device_state(ctx, pos)?.head_input();
            rows.push((input, world.cloud_distribution(ctx, pos)?));
        }
        scene += 1;
    }
    rows.shuffle(&mut keyed_rng(seed, HARVEST_STREAM, 0));

    let (din, n) = (rows[0].0.len(), rows[0].1.len());
    rows.chunks(batch_size)
        .map(|chunk| {
            let inputs = Array2::from_shape_fn((chunk.len(), din), |(i, j)| chunk[i].0[j]);
            let dists = Array2::from_shape_fn((chunk.len(), n), |(i, j)| chunk[i].1[j]);
            TrainingBatch::new(inputs, dists)
        })
        .collect()
}

/// Header `step,total,l_center,l_upper,l_lower,l_dro,l_kl`, one row per
/// step.
pub fn write_loss_csv<W: Write>(w: W, history: &[LossBreakdown]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "total", "l_center", "l_upper", "l_lower", "l_dro", "l_kl"])?;
    for (step, l) in history.iter().enumerate() {
        out.write_record(&[
            step.to_string(),
            l.total.to_string(),
            l.l_center.to_string(),
            l.l_upper.to_string(),
            l.l_lower.to_string(),
            l.l_dro.to_string(),
            l.l_kl.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Mean of `KL(q || p_mid)` over a dataset.
pub fn mean_center_kl(ih: &InterHeadParams, dataset: &[TrainingBatch]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in dataset {
        check_batch(ih, b)?;
        let (c, _) = forward_all(ih, b.inputs.view());
        for (row, q) in c.rows().into_iter().zip(b.cloud_dists.rows()) {
            let p = softmax(row.as_slice().expect("contiguous"));
            total += kl_align(q.as_slice().expect("contiguous"), &p);
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}
