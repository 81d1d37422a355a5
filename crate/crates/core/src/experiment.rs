//! Sweeps: cross products of decode settings run on a bounded worker pool.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{run_policy, DecodeConfig, Episode, Policy, Tau};
use crate::error::{invalid, Error, Result};
use crate::toy::{InterHeadParams, ModelParams, SceneSpec, ToyWorld};

/// Grids over decode settings; an absent grid keeps the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub tau: Option<Vec<Tau>>,
    pub rho: Option<Vec<f64>>,
    #[serde(rename = "K")]
    pub k: Option<Vec<usize>>,
    pub seed: Option<Vec<u64>>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("tau", self.tau.as_ref().map(Vec::len)),
            ("rho", self.rho.as_ref().map(Vec::len)),
            ("K", self.k.as_ref().map(Vec::len)),
            ("seed", self.seed.as_ref().map(Vec::len)),
        ];
        for (name, len) in empty {
            if len == Some(0) {
                return Err(invalid(format!("sweep.{name} is empty")));
            }
        }
        Ok(())
    }

    /// Every grid cell as a full config, sorted by `(tau, rho, K, seed)`.
    pub fn expand(&self, base: &DecodeConfig) -> Result<Vec<DecodeConfig>> {
        self.validate()?;
        let taus: Vec<f64> = self
            .tau
            .as_ref()
            .map_or(vec![base.tau], |v| v.iter().map(|t| t.0).collect());
        let rhos = self.rho.clone().unwrap_or(vec![base.rho]);
        let ks = self.k.clone().unwrap_or(vec![base.k]);
        let seeds = self.seed.clone().unwrap_or(vec![base.seed]);
        let mut out = Vec::with_capacity(taus.len() * rhos.len() * ks.len() * seeds.len());
        for &tau in &taus {
            for &rho in &rhos {
                for &k in &ks {
                    for &seed in &seeds {
                        let cfg = DecodeConfig {
                            tau,
                            rho,
                            k,
                            seed,
                            ..base.clone()
                        };
                        cfg.validate()?;
                        out.push(cfg);
                    }
                }
            }
        }
        out.sort_by(sweep_order);
        Ok(out)
    }
}

fn sweep_order(a: &DecodeConfig, b: &DecodeConfig) -> Ordering {
    a.tau
        .total_cmp(&b.tau)
        .then(a.rho.total_cmp(&b.rho))
        .then(a.k.cmp(&b.k))
        .then(a.seed.cmp(&b.seed))
}

/// One (config, policy) result.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub config: DecodeConfig,
    pub policy: Policy,
    pub episode: Episode,
}

/// Runs every policy on every config. The scene seed is the config's seed.
/// Results come back in input order (configs outer, policies inner)
/// regardless of `jobs`.
pub fn run_cells(
    scene: &SceneSpec,
    params: &ModelParams,
    head: Option<&InterHeadParams>,
    configs: &[DecodeConfig],
    policies: &[Policy],
    jobs: usize,
) -> Result<Vec<Cell>> {
    if policies.is_empty() {
        return Err(invalid("no policies to run"));
    }
    let work: Vec<(&DecodeConfig, Policy)> = configs
        .iter()
        .flat_map(|c| policies.iter().map(move |&p| (c, p)))
        .collect();
    let run_one = |(cfg, policy): &(&DecodeConfig, Policy)| -> Result<Cell> {
        let world = ToyWorld::new(scene.with_seed(cfg.seed), params)?;
        let episode = run_policy(*policy, cfg, &world, head)?;
        Ok(Cell {
            config: (*cfg).clone(),
            policy: *policy,
            episode,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Internal(format!("worker pool: {e}")))?;
    pool.install(|| work.par_iter().map(run_one).collect())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // Ties share the mean of their 1-based ranks.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side is constant or lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
