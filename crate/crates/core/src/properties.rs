//! Runtime property oracles.
//!
//! Each check draws seeded random instances, tests one mathematical
//! property and reports the first counterexample it finds.

use std::fmt;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::Result;
use crate::interval::{
    feasible_polytope_sample, inter_fuse, inter_fuse_raw, uncertainty_from_widths, widths, FuseConfig,
    LogitIntervalVec, ProbIntervalVec, SUM_TOL,
};
use crate::math::{keyed_rng, l1_distance, softmax};
use crate::toy::InterHeadParams;
use crate::training::{
    analytic_gradient, dro_loss, dro_weights, finite_difference_gradient, InterDroConfig, TrainingBatch,
};

/// Outcome of one property check.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyReport {
    pub name: &'static str,
    pub cases: usize,
    /// Description of the first counterexample.
    pub failure: Option<String>,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

impl fmt::Display for PropertyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.failure {
            None => write!(f, "PASS {} ({} cases)", self.name, self.cases),
            Some(why) => write!(f, "FAIL {}: {}", self.name, why),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySettings {
    pub seed: u64,
    /// Vocabulary sizes for the fuse checks.
    pub sizes: Vec<usize>,
    /// Random instances per size (fuse) or in total (other checks).
    pub cases: usize,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            seed: 0,
            sizes: vec![2, 64, 4096],
            cases: 1000,
        }
    }
}

/// Records the first failure and counts cases.
struct Check {
    name: &'static str,
    cases: usize,
    failure: Option<String>,
}

impl Check {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            cases: 0,
            failure: None,
        }
    }

    fn case(&mut self, ok: bool, why: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok && self.failure.is_none() {
            self.failure = Some(why());
        }
    }

    fn done(&self) -> bool {
        self.failure.is_some()
    }

    fn report(self) -> PropertyReport {
        PropertyReport {
            name: self.name,
            cases: self.cases,
            failure: self.failure,
        }
    }
}

fn show(v: &[f64]) -> String {
    if v.len() <= 8 {
        format!("{v:?}")
    } else {
        format!("[{} values]", v.len())
    }
}

/// Random logit interval with `c ~ N(0, 3)` and `r ~ |N(0, 2)|`.
pub fn random_logit_interval(rng: &mut impl Rng, n: usize) -> LogitIntervalVec {
    let c = Normal::<f64>::new(0.0, 3.0).expect("valid normal");
    let r = Normal::<f64>::new(0.0, 2.0).expect("valid normal");
    let center: Vec<f64> = (0..n).map(|_| c.sample(rng)).collect();
    let radius: Vec<f64> = (0..n).map(|_| r.sample(rng).abs()).collect();
    LogitIntervalVec::new(center, radius).expect("finite draws")
}

/// Checks the probability-interval invariants directly, without trusting
/// [`ProbIntervalVec::validate`].
pub fn interval_violation(p: &ProbIntervalVec) -> Option<String> {
    for (i, (&l, &u)) in p.lower().iter().zip(p.upper()).enumerate() {
        if !(0.0 <= l && l <= u && u <= 1.0) {
            return Some(format!("token {i}: lower {l}, upper {u}"));
        }
    }
    let (sl, su) = (p.lower_sum(), p.upper_sum());
    if sl > 1.0 + SUM_TOL {
        return Some(format!("sum of lower bounds {sl} > 1"));
    }
    if su + 2.0 * SUM_TOL < 1.0 + SUM_TOL {
        return Some(format!("sum of upper bounds {su} < 1"));
    }
    None
}

/// Validity of an arbitrary fuse implementation over random inputs.
pub fn check_fuse_validity<F>(fuse: F, sizes: &[usize], cases: usize, seed: u64) -> PropertyReport
where
    F: Fn(&LogitIntervalVec) -> Result<ProbIntervalVec>,
{
    let mut check = Check::new("interfuse_validity");
    for &n in sizes {
        let mut rng = keyed_rng(seed, 1, n as u64);
        for k in 0..cases {
            let iv = random_logit_interval(&mut rng, n);
            let problem = match fuse(&iv) {
                Ok(p) => interval_violation(&p),
                Err(e) => Some(e.to_string()),
            };
            check.case(problem.is_none(), || {
                format!(
                    "n={n} seed={seed} case={k}: {}; center={} radius={}",
                    problem.unwrap_or_default(),
                    show(iv.center()),
                    show(iv.radius())
                )
            });
            if check.done() {
                return check.report();
            }
        }
    }
    check.report()
}

fn fuse_monotone(sizes: &[usize], cases: usize, seed: u64) -> PropertyReport {
    let mut check = Check::new("fuse_monotone_in_radius");
    let clamp = FuseConfig::default().radius_clamp_max;
    for &n in sizes.iter().filter(|&&n| n <= 512) {
        let mut rng = keyed_rng(seed, 2, n as u64);
        for _ in 0..cases.min(200) {
            let iv = random_logit_interval(&mut rng, n);
            let i = rng.random_range(0..n);
            let mut r2 = iv.radius().to_vec();
            r2[i] += rng.random_range(0.0..2.0);
            let wider = LogitIntervalVec::new(iv.center().to_vec(), r2).expect("finite");
            let (l1, u1) = inter_fuse_raw(&iv, clamp);
            let (l2, u2) = inter_fuse_raw(&wider, clamp);
            check.case(u2[i] >= u1[i] && l2[i] <= l1[i], || {
                format!("n={n} token {i}: upper {} -> {}, lower {} -> {}", u1[i], u2[i], l1[i], l2[i])
            });
        }
    }
    check.report()
}

fn random_widths(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(1..=64);
    let sparse = rng.random_bool(0.3);
    (0..n)
        .map(|_| {
            if sparse && rng.random_bool(0.5) {
                0.0
            } else {
                rng.random_range(0.0..1.0)
            }
        })
        .collect()
}

fn score_theorems(cases: usize, seed: u64) -> Vec<PropertyReport> {
    let mut rng = keyed_rng(seed, 3, 0);
    let mut scaling = Check::new("score_scaling");
    let mut zeros = Check::new("score_zero_iff");
    let mut sigma = Check::new("sigma_bound");
    let mut s2 = Check::new("score_s2_bound");
    let mut cv = Check::new("cv_identity");
    for _ in 0..cases {
        let d = random_widths(&mut rng);
        let n = d.len() as f64;
        let u = uncertainty_from_widths(&d);

        let alpha = rng.random_range(0.0..10.0);
        let scaled: Vec<f64> = d.iter().map(|x| alpha * x).collect();
        let us = uncertainty_from_widths(&scaled).score;
        let want = alpha * alpha * u.score;
        scaling.case((us - want).abs() <= 1e-9 * want.abs().max(f64::MIN_POSITIVE) || us == want, || {
            format!("alpha={alpha} widths={}: {us} vs {want}", show(&d))
        });

        zeros.case((u.score == 0.0) == (u.omega == 0.0 || u.sigma == 0.0), || {
            format!("widths={}: score {} omega {} sigma {}", show(&d), u.score, u.omega, u.sigma)
        });

        let bound = (n - 1.0).sqrt() / n * u.omega;
        sigma.case(u.sigma <= bound + 1e-12, || format!("widths={}: {} > {bound}", show(&d), u.sigma));

        let sq: f64 = d.iter().map(|x| x * x).sum();
        s2.case(u.score <= sq / 2.0 + 1e-12, || format!("widths={}: {} > {}", show(&d), u.score, sq / 2.0));

        if let Some(c) = u.cv {
            let want = n * u.mean_width.powi(2) * c;
            cv.case((u.score - want).abs() <= 1e-9 * want.max(f64::MIN_POSITIVE), || {
                format!("widths={}: {} vs {want}", show(&d), u.score)
            });
        }
    }
    // Tightness at one-hot widths.
    for n in 1..=64usize {
        let mut d = vec![0.0; n];
        d[n / 2] = 0.7;
        let u = uncertainty_from_widths(&d);
        let bound = (n as f64 - 1.0).sqrt() / n as f64 * u.omega;
        sigma.case((u.sigma - bound).abs() <= 1e-12, || format!("one-hot n={n}: {} vs {bound}", u.sigma));
    }
    vec![scaling.report(), zeros.report(), sigma.report(), s2.report(), cv.report()]
}

/// Token `k` pinned at `1 - t`; the other tokens share `t` as `[0, t/(n-1)]`.
pub fn local_certainty_interval(n: usize, t: f64) -> ProbIntervalVec {
    let mut lower = vec![0.0; n];
    let mut upper = vec![t / (n - 1) as f64; n];
    lower[0] = 1.0 - t;
    upper[0] = 1.0 - t;
    ProbIntervalVec::new(lower, upper).expect("valid family")
}

fn local_certainty() -> PropertyReport {
    let mut check = Check::new("local_certainty");
    for n in [2, 8, 64, 4096] {
        let s = uncertainty_from_widths(&widths(&local_certainty_interval(n, 1e-4))).score;
        check.case(s < 1e-6, || format!("n={n} t=1e-4: score {s}"));
    }
    check.report()
}

/// Random valid interval of size `n` around a random distribution.
pub fn random_prob_interval(rng: &mut impl Rng, n: usize) -> ProbIntervalVec {
    let logits: Vec<f64> = (0..n).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    let q = softmax(&logits);
    let lower: Vec<f64> = q.iter().map(|&x| x * rng.random_range(0.0..1.0)).collect();
    let upper: Vec<f64> = q.iter().map(|&x| (x + rng.random_range(0.0..0.3)).min(1.0)).collect();
    ProbIntervalVec::new(lower, upper).expect("contains q")
}

fn polytope_diameter(cases: usize, seed: u64) -> PropertyReport {
    let mut check = Check::new("polytope_diameter");
    let mut rng = keyed_rng(seed, 4, 0);
    let intervals = 20;
    let pairs = cases.div_ceil(intervals);
    for k in 0..intervals {
        let n = 2 + k % 5;
        let p = random_prob_interval(&mut rng, n);
        let omega: f64 = widths(&p).iter().sum();
        let samples = match feasible_polytope_sample(&p, 2 * pairs, seed ^ k as u64) {
            Ok(s) => s,
            Err(e) => {
                check.case(false, || format!("sampler failed on n={n}: {e}"));
                continue;
            }
        };
        for pair in samples.chunks(2) {
            let dist = l1_distance(&pair[0], &pair[1]);
            check.case(dist <= omega + 1e-12, || {
                format!("lower={} upper={}: |q-q'|_1 = {dist} > {omega}", show(p.lower()), show(p.upper()))
            });
        }
    }
    check.report()
}

fn dro_properties(cases: usize, seed: u64) -> PropertyReport {
    let mut check = Check::new("dro_weights");
    let mut rng = keyed_rng(seed, 5, 0);
    for _ in 0..cases.min(500) {
        let n = rng.random_range(1..=16);
        let ce: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let alpha = rng.random_range(0.0..5.0);
        let w = dro_weights(&ce, alpha);
        let sum: f64 = w.iter().sum();
        check.case((sum - 1.0).abs() <= 1e-12, || format!("ce={} alpha={alpha}: sum {sum}", show(&ce)));
        let uni = dro_weights(&ce, 0.0);
        check.case(uni.iter().all(|&x| (x - 1.0 / n as f64).abs() <= 1e-15), || {
            format!("ce={}: alpha=0 weights not uniform", show(&ce))
        });
        let mean = ce.iter().sum::<f64>() / n as f64;
        let max = ce.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let l = dro_loss(&ce, alpha);
        check.case(mean - 1e-12 <= l && l <= max + 1e-12, || {
            format!("ce={} alpha={alpha}: {l} outside [{mean}, {max}]", show(&ce))
        });
        let l2 = dro_loss(&ce, alpha + rng.random_range(0.0..2.0));
        check.case(l2 >= l - 1e-12, || format!("ce={}: loss fell from {l} to {l2} as alpha grew", show(&ce)));
    }
    check.report()
}

/// A random `(head, batch)` instance with `n` tokens, input dimension `d`
/// and `rows` samples.
pub fn random_training_instance(rng: &mut impl Rng, n: usize, d: usize, rows: usize) -> (InterHeadParams, TrainingBatch) {
    let mut g = |scale: f64| scale * rng.sample::<f64, _>(StandardNormal);
    let mut ih = InterHeadParams::zeros(n, d);
    ih.w_c.mapv_inplace(|_| g(0.5));
    ih.b_c.mapv_inplace(|_| g(0.5));
    ih.w_r.mapv_inplace(|_| g(0.5));
    ih.b_r.mapv_inplace(|_| g(0.5));
    let inputs = Array2::from_shape_fn((rows, d), |_| g(1.0));
    let mut dists = Array2::zeros((rows, n));
    for mut row in dists.rows_mut() {
        let logits: Vec<f64> = (0..n).map(|_| g(1.5)).collect();
        for (x, p) in row.iter_mut().zip(softmax(&logits)) {
            *x = p;
        }
    }
    (ih, TrainingBatch::new(inputs, dists).expect("valid batch"))
}

/// Largest absolute difference between two parameter sets.
pub fn max_abs_diff(a: &InterHeadParams, b: &InterHeadParams) -> f64 {
    a.w_c
        .iter()
        .zip(&b.w_c)
        .chain(a.b_c.iter().zip(&b.b_c))
        .chain(a.w_r.iter().zip(&b.w_r))
        .chain(a.b_r.iter().zip(&b.b_r))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn gradient_check(seed: u64) -> PropertyReport {
    let mut check = Check::new("inter_dro_gradient");
    let mut rng = keyed_rng(seed, 6, 0);
    for k in 0..20 {
        let (ih, batch) = random_training_instance(&mut rng, 5, 3, 4);
        let cfg = InterDroConfig {
            alpha: rng.random_range(0.0..2.0),
            ..InterDroConfig::default()
        };
        let outcome = analytic_gradient(&ih, &batch, &cfg)
            .and_then(|a| Ok((a, finite_difference_gradient(&ih, &batch, &cfg, 1e-5)?)));
        match outcome {
            Ok((a, f)) => {
                let err = max_abs_diff(&a, &f);
                check.case(err <= 1e-5, || format!("instance {k} (seed {seed}): max abs error {err:e}"));
            }
            Err(e) => check.case(false, || format!("instance {k}: {e}")),
        }
    }
    check.report()
}

/// Every property at the given settings.
pub fn run_suite(settings: &VerifySettings) -> Vec<PropertyReport> {
    let (seed, cases) = (settings.seed, settings.cases);
    let fuse_cfg = FuseConfig::default();
    let mut out = vec![
        check_fuse_validity(|iv| inter_fuse(iv, &fuse_cfg), &settings.sizes, cases, seed),
        fuse_monotone(&settings.sizes, cases, seed),
    ];
    out.extend(score_theorems(cases, seed));
    out.push(local_certainty());
    out.push(polytope_diameter(cases, seed));
    out.push(dro_properties(cases, seed));
    out.push(gradient_check(seed));
    out
}
