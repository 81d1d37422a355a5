//! Interval-valued token probabilities.
//!
//! A logit interval `[c - r, c + r]` is turned into per-token probability
//! bounds by [`inter_fuse`]. The widths of those bounds feed the scalar
//! gate statistic `U = Omega * Sigma` computed by [`uncertainty_score`],
//! where `Omega` is the L1 norm of the widths and `Sigma` their population
//! standard deviation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::math::argmax;

/// Slack allowed on the `sum(lower) <= 1 <= sum(upper)` validity condition.
pub const SUM_TOL: f64 = 1e-9;

/// Center/radius logits for every vocabulary entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitIntervalVec {
    center: Vec<f64>,
    radius: Vec<f64>,
}

impl LogitIntervalVec {
    pub fn new(center: Vec<f64>, radius: Vec<f64>) -> Result<Self> {
        check_len("radius", center.len(), radius.len())?;
        if center.iter().chain(&radius).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("logit interval"));
        }
        if let Some(r) = radius.iter().find(|&&r| r < 0.0) {
            return Err(invalid(format!("negative radius {r}")));
        }
        Ok(Self { center, radius })
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn radius(&self) -> &[f64] {
        &self.radius
    }

    pub fn len(&self) -> usize {
        self.center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }
}

/// Lower/upper probability bounds over a vocabulary.
///
/// Always satisfies `0 <= lower[i] <= upper[i] <= 1` and
/// `sum(lower) <= 1 <= sum(upper)` up to [`SUM_TOL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProbInterval")]
pub struct ProbIntervalVec {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Deserialize)]
struct RawProbInterval {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<RawProbInterval> for ProbIntervalVec {
    type Error = Error;

    fn try_from(raw: RawProbInterval) -> Result<Self> {
        Self::new(raw.lower, raw.upper)
    }
}

impl ProbIntervalVec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let p = Self { lower, upper };
        p.validate()?;
        Ok(p)
    }

    /// Skips validation. Only for building deliberately broken inputs in
    /// negative-control checks.
    #[doc(hidden)]
    pub fn new_unchecked(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self { lower, upper }
    }

    /// The degenerate interval `lower = upper = q`.
    pub fn point(q: Vec<f64>) -> Result<Self> {
        Self::new(q.clone(), q)
    }

    pub fn validate(&self) -> Result<()> {
        check_len("upper bound", self.lower.len(), self.upper.len())?;
        for (i, (&l, &u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(l.is_finite() && u.is_finite()) {
                return Err(Error::NonFinite("probability interval"));
            }
            if !(0.0 <= l && l <= u && u <= 1.0) {
                return Err(invalid(format!(
                    "entry {i}: need 0 <= lower <= upper <= 1, got [{l}, {u}]"
                )));
            }
        }
        let (sl, su) = (self.lower_sum(), self.upper_sum());
        if sl > 1.0 + SUM_TOL || su < 1.0 - SUM_TOL {
            return Err(invalid(format!(
                "bounds do not bracket a distribution: sum(lower) = {sl}, sum(upper) = {su}"
            )));
        }
        Ok(())
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn lower_sum(&self) -> f64 {
        self.lower.iter().sum()
    }

    pub fn upper_sum(&self) -> f64 {
        self.upper.iter().sum()
    }
}

/// Normalization constants and radius clamp for [`inter_fuse`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FuseConfig {
    /// Lower bounds are rescaled so their sum does not exceed this.
    pub lower_target: f64,
    /// Upper bounds are rescaled so their sum is at least this.
    pub upper_target: f64,
    pub radius_clamp_max: f64,
}

impl Default for FuseConfig {
    fn default() -> Self {
        Self {
            lower_target: 0.99,
            upper_target: 1.01,
            radius_clamp_max: 10.0,
        }
    }
}

/// Per-token bounds before the sum normalization.
///
/// `p_i^l = e^(c_i - r_i) / (sum_{j != i} e^(c_j) + e^(c_i - r_i))` and
/// symmetrically for the upper bound with `+r_i`. The radius is clamped to
/// `radius_clamp_max` and the maximum center is subtracted before any
/// exponentiation.
pub fn inter_fuse_raw(intervals: &LogitIntervalVec, radius_clamp_max: f64) -> (Vec<f64>, Vec<f64>) {
    let c = intervals.center();
    let n = c.len();
    let cmax = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = c.iter().map(|&ci| (ci - cmax).exp()).collect();

    // Exclusive sums via prefix/suffix accumulation: subtracting e_i from
    // the total cancels catastrophically when e_i dominates.
    let mut others = vec![0.0; n];
    let mut acc = 0.0;
    for i in 0..n {
        others[i] = acc;
        acc += e[i];
    }
    acc = 0.0;
    for i in (0..n).rev() {
        others[i] += acc;
        acc += e[i];
    }

    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    for i in 0..n {
        let r = intervals.radius()[i].min(radius_clamp_max);
        let lo = (c[i] - r - cmax).exp();
        let up = (c[i] + r - cmax).exp();
        lower.push(lo / (others[i] + lo));
        upper.push(up / (others[i] + up));
    }
    (lower, upper)
}

/// Converts logit intervals to a valid probability interval.
pub fn inter_fuse(intervals: &LogitIntervalVec, cfg: &FuseConfig) -> Result<ProbIntervalVec> {
    if intervals.len() < 2 {
        return Err(invalid("inter_fuse needs a vocabulary of at least 2"));
    }
    let (mut lower, mut upper) = inter_fuse_raw(intervals, cfg.radius_clamp_max);

    let sl: f64 = lower.iter().sum();
    let su: f64 = upper.iter().sum();
    let lo_scale = (cfg.lower_target / sl).min(1.0);
    let up_scale = (cfg.upper_target / su).max(1.0);
    for l in &mut lower {
        *l *= lo_scale;
    }
    for u in &mut upper {
        *u = (*u * up_scale).min(1.0);
    }

    let p = ProbIntervalVec { lower, upper };
    p.validate()
        .map_err(|e| Error::Internal(format!("inter_fuse produced an invalid interval: {e}")))?;
    Ok(p)
}

/// `upper - lower`, elementwise.
pub fn widths(p: &ProbIntervalVec) -> Vec<f64> {
    p.lower
        .iter()
        .zip(&p.upper)
        .map(|(l, u)| (u - l).max(0.0))
        .collect()
}

/// Decomposition of the gate statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBreakdown {
    /// L1 norm of the widths.
    pub omega: f64,
    /// Population standard deviation of the widths.
    pub sigma: f64,
    pub score: f64,
    pub mean_width: f64,
    /// `sigma / mean_width`; `None` when every width is zero.
    pub cv: Option<f64>,
}

pub fn uncertainty_score(p: &ProbIntervalVec) -> UncertaintyBreakdown {
    uncertainty_from_widths(&widths(p))
}

/// Same statistic computed directly on a nonnegative width vector.
pub fn uncertainty_from_widths(delta: &[f64]) -> UncertaintyBreakdown {
    let n = delta.len() as f64;
    let omega: f64 = delta.iter().sum();
    let mean_width = omega / n;
    // Equal widths get an exact zero; rounding in the mean would not.
    let sigma = if delta.iter().all(|&d| d == delta[0]) {
        0.0
    } else {
        (delta.iter().map(|d| (d - mean_width).powi(2)).sum::<f64>() / n).sqrt()
    };
    UncertaintyBreakdown {
        omega,
        sigma,
        score: omega * sigma,
        mean_width,
        cv: (mean_width > 0.0).then(|| sigma / mean_width),
    }
}

/// Draws `count` distributions from `{q : lower <= q <= upper, sum q = 1}`.
///
/// Each draw is a Dirichlet(1/2) mixture of a handful of polytope vertices.
/// A vertex is built by starting from `lower` and greedily filling the
/// remaining mass in a random coordinate order. The small concentration puts
/// many draws near vertices, so the samples reach the extremes of the set.
/// This is a test oracle; it is not uniform on the polytope.
pub fn feasible_polytope_sample(p: &ProbIntervalVec, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let n = p.len();
    let slack = 1.0 - p.lower_sum();
    if slack < -SUM_TOL || p.upper_sum() < 1.0 - SUM_TOL {
        return Err(Error::Internal("feasible polytope is empty".into()));
    }
    let slack = slack.max(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(0.5, 1.0).expect("valid gamma parameters");
    let mixture = (n + 1).min(8);
    let mut order: Vec<usize> = (0..n).collect();

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let weights: Vec<f64> = (0..mixture).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = weights.iter().sum();
        let mut q = vec![0.0; n];
        for w in weights {
            order.shuffle(&mut rng);
            let v = polytope_vertex(p, &order, slack);
            for (qi, vi) in q.iter_mut().zip(v) {
                *qi += w / total * vi;
            }
        }
        for (i, qi) in q.iter_mut().enumerate() {
            *qi = qi.clamp(p.lower[i], p.upper[i]);
        }
        out.push(q);
    }
    Ok(out)
}

fn polytope_vertex(p: &ProbIntervalVec, order: &[usize], slack: f64) -> Vec<f64> {
    let mut v = p.lower.clone();
    let mut remaining = slack;
    for &i in order {
        if remaining <= 0.0 {
            break;
        }
        let add = (p.upper[i] - p.lower[i]).min(remaining);
        v[i] += add;
        remaining -= add;
    }
    v
}

fn check_distributions(dists: &[Vec<f64>]) -> Result<usize> {
    let first = dists
        .first()
        .ok_or_else(|| invalid("need at least one distribution"))?;
    let n = first.len();
    for d in dists {
        check_len("distribution", n, d.len())?;
    }
    Ok(n)
}

/// Elementwise mean of probability vectors (soft voting).
pub fn ensemble_average(dists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = check_distributions(dists)?;
    for (k, d) in dists.iter().enumerate() {
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(invalid(format!("distribution {k} sums to {s}")));
        }
    }
    let m = dists.len() as f64;
    let mut avg = vec![0.0; n];
    for d in dists {
        for (a, x) in avg.iter_mut().zip(d) {
            *a += x / m;
        }
    }
    Ok(avg)
}

/// Plurality of per-distribution argmaxes (hard voting); ties go to the
/// lowest token index.
pub fn majority_vote(dists: &[Vec<f64>]) -> Result<usize> {
    let n = check_distributions(dists)?;
    let mut votes = vec![0.0; n];
    for d in dists {
        votes[argmax(d)] += 1.0;
    }
    Ok(argmax(&votes))
}
