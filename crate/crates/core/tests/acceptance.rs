//! Acceptance criteria, one line each with its runtime against the limit.
//!
//! Runs as a plain binary so the PASS/FAIL lines are always printed.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ciar_core::decoder::{run_baseline_device, run_ciar, run_uniform_verification, DecodeConfig};
use ciar_core::experiment::spearman;
use ciar_core::interval::{feasible_polytope_sample, inter_fuse, uncertainty_from_widths, widths, FuseConfig};
use ciar_core::math::{keyed_rng, l1_distance};
use ciar_core::netsim::{builtin_profiles, episode_latency, t_comm, ComputeCost, NetworkProfile, PayloadModel};
use ciar_core::properties::{
    interval_violation, local_certainty_interval, max_abs_diff, random_logit_interval, random_prob_interval,
    random_training_instance,
};
use ciar_core::toy::{AnalyticHeadConfig, InterHeadParams, ModelParams, SceneSpec, ToyWorld};
use ciar_core::training::{
    analytic_gradient, dro_loss, dro_weights, finite_difference_gradient, harvest_dataset, train, InterDroConfig,
    TrainReport, TRAIN_SCENE_OFFSET,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn default_params() -> ModelParams {
    ModelParams::generate(64, 32, 0).expect("default model")
}

fn ac1_fuse_validity() -> Outcome {
    let cfg = FuseConfig::default();
    let sizes = [2usize, 8, 64, 512, 4096];
    let per_size = 10_000 / sizes.len();
    for &n in &sizes {
        let mut rng = keyed_rng(101, 0, n as u64);
        for k in 0..per_size {
            let iv = random_logit_interval(&mut rng, n);
            let p = inter_fuse(&iv, &cfg).map_err(|e| format!("n={n} case {k}: {e}"))?;
            if let Some(v) = interval_violation(&p) {
                return Err(format!("n={n} case {k}: {v}"));
            }
        }
    }
    Ok(format!("{} inputs valid", per_size * sizes.len()))
}

fn ac2_score_theorems() -> Outcome {
    let mut rng = keyed_rng(202, 0, 0);
    for k in 0..1000 {
        let n = rng.random_range(2..=64);
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let u = uncertainty_from_widths(&d);
        let a: f64 = rng.random_range(0.01..10.0);
        let scaled: Vec<f64> = d.iter().map(|x| a * x).collect();
        let us = uncertainty_from_widths(&scaled).score;
        ensure((us - a * a * u.score).abs() <= 1e-9 * a * a * u.score, || {
            format!("scaling case {k}: {us} vs {}", a * a * u.score)
        })?;

        let nf = n as f64;
        // Population std and the bound, computed here from scratch.
        let mean = d.iter().sum::<f64>() / nf;
        let sigma = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf).sqrt();
        let omega: f64 = d.iter().sum();
        ensure((sigma - u.sigma).abs() <= 1e-12 && (omega - u.omega).abs() <= 1e-12, || {
            format!("case {k}: sigma/omega disagree with direct computation")
        })?;
        ensure(sigma <= (nf - 1.0).sqrt() / nf * omega + 1e-12, || format!("sigma bound case {k}"))?;
        let s2: f64 = d.iter().map(|x| x * x).sum();
        ensure(u.score <= s2 / 2.0 + 1e-12, || format!("S2 bound case {k}: {} > {}", u.score, s2 / 2.0))?;
        let cv = sigma / mean;
        ensure((u.score - nf * mean * mean * cv).abs() <= 1e-9 * u.score.max(1e-300), || {
            format!("cv identity case {k}")
        })?;
    }
    for n in 2..=64usize {
        let mut d = vec![0.0; n];
        d[0] = 0.5;
        let u = uncertainty_from_widths(&d);
        let bound = (n as f64 - 1.0).sqrt() / n as f64 * u.omega;
        ensure((u.sigma - bound).abs() <= 1e-12, || format!("one-hot n={n}: {} vs {bound}", u.sigma))?;
    }
    for n in [2usize, 8, 64, 4096] {
        let s = uncertainty_from_widths(&widths(&local_certainty_interval(n, 1e-4))).score;
        ensure(s < 1e-6, || format!("local certainty n={n}: {s}"))?;
    }
    let mut pairs = 0;
    for k in 0..20u64 {
        let n = 2 + (k as usize) % 5;
        let p = random_prob_interval(&mut rng, n);
        let omega: f64 = widths(&p).iter().sum();
        let q = feasible_polytope_sample(&p, 100, k).map_err(|e| e.to_string())?;
        for pair in q.chunks(2) {
            let dist = l1_distance(&pair[0], &pair[1]);
            ensure(dist <= omega + 1e-12, || format!("diameter n={n}: {dist} > {omega}"))?;
            pairs += 1;
        }
    }
    Ok(format!("1000 random width vectors, {pairs} polytope pairs"))
}

fn ac3_trace_arithmetic() -> Outcome {
    let mut checked = 0;
    for (seq_len, k, rho) in [(256usize, 4usize, 0.0), (256, 4, 0.06), (64, 7, 0.1)] {
        let side = (seq_len as f64).sqrt() as usize;
        let scene = SceneSpec {
            height: side,
            width: side,
            interior_noise: 0.0,
            boundary_noise: 0.0,
            ..SceneSpec::default()
        };
        let params = ModelParams::generate_shared(scene.vocab_size, 32, 0).map_err(|e| e.to_string())?;
        let head = InterHeadParams::analytic(&params, &AnalyticHeadConfig::default());
        let m = (rho * seq_len as f64).floor() as usize;
        let want = (seq_len - m).div_ceil(k + 1);
        for seed in 0..5 {
            let world = ToyWorld::new(scene.with_seed(seed), &params).map_err(|e| e.to_string())?;
            let cfg = DecodeConfig {
                seq_len,
                k,
                tau: 0.0,
                rho,
                seed,
                ..DecodeConfig::default()
            };
            let ep = run_ciar(&cfg, &world, &head).map_err(|e| e.to_string())?;
            ensure(ep.metrics.episodes == want, || {
                format!(
                    "(seq_len {seq_len}, K {k}, rho {rho}) seed {seed}: {} episodes, expected {want}",
                    ep.metrics.episodes
                )
            })?;
            checked += 1;
        }
    }
    Ok(format!("{checked} episodes match ceil((seq_len - m)/(K + 1))"))
}

fn ac4_gate_dominance() -> Outcome {
    let params = default_params();
    let head = InterHeadParams::analytic(&params, &AnalyticHeadConfig::default());
    let (mut b_rate, mut i_rate) = (0.0, 0.0);
    let seeds = 20u64;
    for seed in 0..seeds {
        let world = ToyWorld::new(SceneSpec::default().with_seed(seed), &params).map_err(|e| e.to_string())?;
        let cfg = DecodeConfig {
            seed,
            ..DecodeConfig::default()
        };
        let ciar = run_ciar(&cfg, &world, &head).map_err(|e| e.to_string())?;
        let uni = run_uniform_verification(&cfg, &world, &head).map_err(|e| e.to_string())?;
        ensure(ciar.metrics.episodes <= uni.metrics.episodes, || {
            format!("seed {seed}: ciar {} > uniform {}", ciar.metrics.episodes, uni.metrics.episodes)
        })?;
        let g = ciar.metrics.gate;
        b_rate += g.boundary_defer_rate().unwrap_or(0.0) / seeds as f64;
        i_rate += g.interior_defer_rate().unwrap_or(0.0) / seeds as f64;
    }
    ensure(b_rate > i_rate, || format!("boundary defer {b_rate:.4} <= interior {i_rate:.4}"))?;
    Ok(format!("{seeds} seeds; defer rate boundary {b_rate:.3}, interior {i_rate:.3}"))
}

fn ac5_threshold_trend() -> Outcome {
    let params = default_params();
    let head = InterHeadParams::analytic(&params, &AnalyticHeadConfig::default());
    let taus = [0.05, 0.1, 0.2, 0.3, 0.4];
    let seeds = 50u64;
    let mut rates = vec![0.0; taus.len()];
    for seed in 0..seeds {
        let world = ToyWorld::new(SceneSpec::default().with_seed(seed), &params).map_err(|e| e.to_string())?;
        for (r, &tau) in rates.iter_mut().zip(&taus) {
            let cfg = DecodeConfig {
                tau,
                seed,
                ..DecodeConfig::default()
            };
            *r += run_ciar(&cfg, &world, &head).map_err(|e| e.to_string())?.metrics.cloud_call_rate / seeds as f64;
        }
    }
    let rho = spearman(&taus, &rates).ok_or("cloud call rate constant across tau")?;
    let shown: Vec<String> = rates.iter().map(|r| format!("{r:.3}")).collect();
    ensure(rho <= -0.9, || format!("spearman {rho:.3}, rates [{}]", shown.join(", ")))?;
    Ok(format!("spearman {rho:.3}, mean rates [{}]", shown.join(", ")))
}

fn ac6_netsim() -> Outcome {
    let mut rng = keyed_rng(606, 0, 0);
    for _ in 0..1000 {
        let bw: f64 = rng.random_range(0.1..1000.0);
        let rtt: f64 = rng.random_range(0.0..200.0);
        let bits: f64 = rng.random_range(0.0..1e8);
        let profile = NetworkProfile::new(bw, rtt).map_err(|e| e.to_string())?;
        let got = t_comm(&profile, bits).map_err(|e| e.to_string())?;
        let want = rtt + bits / (bw * 1e6) * 1e3;
        ensure((got - want).abs() <= 1e-9 * want.max(1e-300), || format!("t_comm {got} vs {want}"))?;
    }
    let p = builtin_profiles();
    let table = [("5G", 300.0, 10.0), ("4G", 20.0, 50.0), ("WiFi", 100.0, 20.0)];
    ensure(p.len() == 3, || format!("{} builtin profiles", p.len()))?;
    for (name, bw, rtt) in table {
        let got = p.get(name).ok_or(format!("missing profile {name}"))?;
        ensure(got.bandwidth_mbps == bw && got.rtt_ms == rtt, || format!("{name}: {got:?}"))?;
    }

    let params = default_params();
    let head = InterHeadParams::analytic(&params, &AnalyticHeadConfig::default());
    let payload = PayloadModel::for_hidden_dim(32);
    let compute = ComputeCost::default();
    let mut traces = 0;
    for seed in 0..10 {
        let world = ToyWorld::new(SceneSpec::default().with_seed(seed), &params).map_err(|e| e.to_string())?;
        for tau in [0.05, 0.3, f64::INFINITY] {
            let cfg = DecodeConfig {
                tau,
                seed,
                ..DecodeConfig::default()
            };
            for ep in [run_ciar(&cfg, &world, &head), run_uniform_verification(&cfg, &world, &head)] {
                let ep = ep.map_err(|e| e.to_string())?;
                if ep.metrics.episodes == 0 {
                    continue;
                }
                let ratio = |name: &str| episode_latency(&ep.trace, &p[name], &payload, &compute).map(|l| l.comm_ratio);
                let (g4, wifi, g5) = (
                    ratio("4G").map_err(|e| e.to_string())?,
                    ratio("WiFi").map_err(|e| e.to_string())?,
                    ratio("5G").map_err(|e| e.to_string())?,
                );
                ensure(g4 > wifi && wifi > g5, || format!("seed {seed} tau {tau}: {g4} {wifi} {g5}"))?;
                traces += 1;
            }
        }
    }
    Ok(format!("closed form, profile table, ordering on {traces} traces"))
}

fn ac7_inter_dro() -> Outcome {
    let mut rng = keyed_rng(707, 0, 0);
    for k in 0..1000 {
        let n = rng.random_range(1..=20);
        let ce: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..8.0)).collect();
        let alpha: f64 = rng.random_range(0.0..10.0);
        let w = dro_weights(&ce, alpha);
        let sum: f64 = w.iter().sum();
        ensure((sum - 1.0).abs() <= 1e-12, || format!("case {k}: weights sum {sum}"))?;
        ensure(dro_weights(&ce, 0.0).iter().all(|&x| (x - 1.0 / n as f64).abs() <= 1e-15), || {
            format!("case {k}: alpha = 0 not uniform")
        })?;
        let mean = ce.iter().sum::<f64>() / n as f64;
        let max = ce.iter().copied().fold(f64::MIN, f64::max);
        let l = dro_loss(&ce, alpha);
        ensure(mean - 1e-12 <= l && l <= max + 1e-12, || format!("case {k}: {l} outside [{mean}, {max}]"))?;
        let l2 = dro_loss(&ce, alpha + rng.random_range(0.0..5.0));
        ensure(l2 >= l - 1e-12, || format!("case {k}: dro loss fell from {l} to {l2}"))?;
    }
    let cfg = InterDroConfig::default();
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let (ih, batch) = random_training_instance(&mut rng, 5, 3, 4);
        let a = analytic_gradient(&ih, &batch, &cfg).map_err(|e| e.to_string())?;
        let f = finite_difference_gradient(&ih, &batch, &cfg, 1e-5).map_err(|e| e.to_string())?;
        let err = max_abs_diff(&a, &f);
        ensure(err <= 1e-5, || format!("instance {k}: max abs error {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("weight properties on 1000 cases; worst gradient error {worst:.2e}"))
}

struct Trained {
    head: InterHeadParams,
    report: TrainReport,
}

fn train_default() -> Result<(Trained, Vec<ciar_core::training::TrainingBatch>), String> {
    let params = default_params();
    let cfg = InterDroConfig::default();
    let data = harvest_dataset(
        &SceneSpec::default(),
        &params,
        cfg.dataset_size,
        cfg.batch_size,
        TRAIN_SCENE_OFFSET + cfg.seed,
    )
    .map_err(|e| e.to_string())?;
    let init = InterHeadParams::init_random(64, params.head_input_dim(), cfg.radius_init, cfg.seed);
    let (head, report) = train(&init, &data, &cfg).map_err(|e| e.to_string())?;
    Ok((Trained { head, report }, data))
}

fn ac8_training(slot: &mut Option<Trained>) -> Outcome {
    let (trained, data) = train_default()?;
    let r = &trained.report;
    let (k0, k1) = (r.initial_kl(), r.final_loss.mean_kl);
    ensure(r.history.len() <= 1000, || format!("{} steps", r.history.len()))?;
    let ratio = k1 / k0;

    // Determinism: a second run of the same seed reproduces the opening steps.
    let params = default_params();
    let short = InterDroConfig {
        steps: 25,
        ..InterDroConfig::default()
    };
    let init = InterHeadParams::init_random(64, params.head_input_dim(), short.radius_init, short.seed);
    let (_, again) = train(&init, &data, &short).map_err(|e| e.to_string())?;
    ensure(again.history[..] == r.history[..25], || "rerun with the same seed differs".into())?;

    // 100-step moving average of the total loss must not rise.
    let totals: Vec<f64> = r.history.iter().map(|l| l.total).collect();
    let avg: Vec<f64> = totals.windows(100).map(|w| w.iter().sum::<f64>() / 100.0).collect();
    let rise = avg.windows(2).position(|w| w[1] > w[0]);
    let steps = r.history.len();

    *slot = Some(trained);
    ensure(ratio <= 0.5, || format!("KL {k0:.4} -> {k1:.4} (ratio {ratio:.3})"))?;
    if let Some(i) = rise {
        return Err(format!("moving average rises after step {}: {} -> {}", i + 100, avg[i], avg[i + 1]));
    }
    Ok(format!("KL {k0:.4} -> {k1:.4} (ratio {ratio:.3}) in {steps} steps"))
}

fn ac9_end_to_end(trained: Option<&Trained>) -> Outcome {
    let trained = trained.ok_or("no trained head (training failed)")?;
    let params = default_params();
    let seeds = 20u64;
    let (mut kl_ciar, mut kl_dev, mut rate_ciar, mut rate_uni) = (0.0, 0.0, 0.0, 0.0);
    for seed in 0..seeds {
        let world = ToyWorld::new(SceneSpec::default().with_seed(seed), &params).map_err(|e| e.to_string())?;
        let cfg = DecodeConfig {
            tau: 0.03,
            rho: 0.06,
            k: 4,
            seed,
            ..DecodeConfig::default()
        };
        let c = run_ciar(&cfg, &world, &trained.head).map_err(|e| e.to_string())?;
        let u = run_uniform_verification(&cfg, &world, &trained.head).map_err(|e| e.to_string())?;
        let d = run_baseline_device(&cfg, &world, None).map_err(|e| e.to_string())?;
        let s = seeds as f64;
        kl_ciar += c.metrics.mean_kl / s;
        kl_dev += d.metrics.mean_kl / s;
        rate_ciar += c.metrics.cloud_call_rate / s;
        rate_uni += u.metrics.cloud_call_rate / s;
    }
    let summary = format!(
        "KL ciar {kl_ciar:.4} vs device {kl_dev:.4}; call rate ciar {rate_ciar:.3} vs uniform {rate_uni:.3}"
    );
    ensure(kl_ciar <= kl_dev && rate_ciar <= 0.5 * rate_uni, || summary.clone())?;
    Ok(summary)
}

fn report(id: &str, what: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    let took = start.elapsed();
    let in_time = took <= limit;
    let (ok, detail) = match outcome {
        Ok(d) if in_time => (true, d),
        Ok(d) => (false, format!("{d}; over the time limit")),
        Err(e) => (false, e),
    };
    println!(
        "{} {id} {what} [{:.2}s / {}s] {detail}",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        limit.as_secs()
    );
    ok
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture are accepted and ignored; `--list`
    // prints nothing so test discovery stays quiet.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let s = Duration::from_secs;
    let mut trained = None;
    let results = [
        report("AC-1", "interval fusion validity", s(30), ac1_fuse_validity),
        report("AC-2", "uncertainty score theorems", s(60), ac2_score_theorems),
        report("AC-3", "verification episode arithmetic", s(10), ac3_trace_arithmetic),
        report("AC-4", "gate dominance and boundary routing", s(120), ac4_gate_dominance),
        report("AC-5", "threshold trend", s(300), ac5_threshold_trend),
        report("AC-6", "network cost structure", s(10), ac6_netsim),
        report("AC-7", "Inter-DRO loss and gradients", s(30), ac7_inter_dro),
        report("AC-8", "training efficacy", s(180), || ac8_training(&mut trained)),
        report("AC-9", "end-to-end alignment", s(180), || ac9_end_to_end(trained.as_ref())),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
