use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use ciar_core::decoder::{write_metrics_csv, write_trace_jsonl, DecodeConfig, MetricsRow, Policy, METRICS_HEADER};
use ciar_core::experiment::{run_cells, spearman, Cell};
use ciar_core::netsim::{builtin_profiles, episode_latency, LatencyReport};
use ciar_core::properties::{run_suite, VerifySettings};
use ciar_core::toy::InterHeadParams;
use ciar_core::training::{harvest_dataset, train as train_head, write_loss_csv, TRAIN_SCENE_OFFSET};
use ciar_core::Error;

use crate::config::RunConfig;
use crate::{Cli, CliError, Command};

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::Verify { sizes, cases } = &cli.command {
        return verify(cli.seed.unwrap_or(0), sizes, *cases);
    }
    let cfg = load_config(cli)?;
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    match cli.command {
        Command::Simulate => simulate(&cfg, jobs),
        Command::Sweep => sweep(&cfg, jobs),
        Command::Netsim => netsim(&cfg, jobs),
        Command::Train => train(&cfg),
        Command::Verify { .. } => unreachable!("handled above"),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.decode.seed = seed;
        if let Some(t) = cfg.training.as_mut() {
            t.seed = seed;
        }
    }
    if let Some(tau) = cli.tau {
        cfg.decode.tau = tau;
    }
    if let Some(rho) = cli.rho {
        cfg.decode.rho = rho;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.finalize()
}

fn create_file(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let f = File::create(&path).map_err(|e| CliError::Run(format!("cannot create {}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn needs_head(policies: &[Policy]) -> bool {
    policies.iter().any(|p| matches!(p, Policy::Ciar | Policy::Uniform))
}

/// Runs `policies` on `configs` with the configured scene, model and head.
fn run_all(cfg: &RunConfig, configs: &[DecodeConfig], policies: &[Policy], jobs: usize) -> Result<Vec<Cell>, CliError> {
    let params = cfg.model_params()?;
    let head = if needs_head(policies) {
        Some(cfg.head(&params)?)
    } else {
        None
    };
    Ok(run_cells(&cfg.scene, &params, head.as_ref(), configs, policies, jobs)?)
}

fn seed_configs(cfg: &RunConfig) -> Vec<DecodeConfig> {
    cfg.episode_seeds()
        .into_iter()
        .map(|seed| DecodeConfig {
            seed,
            ..cfg.decode.clone()
        })
        .collect()
}

fn trace_name(policy: Policy, seed: u64) -> String {
    match policy {
        Policy::FixedSplit(s) => format!("fixed_split_{s}_seed{seed}.jsonl"),
        p => format!("{}_seed{seed}.jsonl", p.name()),
    }
}

fn latency(cfg: &RunConfig, cell: &Cell) -> Result<LatencyReport, CliError> {
    let profile = cfg.network_profile()?;
    Ok(episode_latency(&cell.episode.trace, &profile, &cell.config.payload, &cfg.compute)?)
}

#[derive(Default)]
struct Summary {
    n: f64,
    rate: f64,
    episodes: f64,
    steps: f64,
    total_ms: f64,
}

fn simulate(cfg: &RunConfig, jobs: usize) -> Result<(), CliError> {
    let configs = seed_configs(cfg);
    let cells = run_all(cfg, &configs, &cfg.policies, jobs)?;
    let out = &cfg.output_dir;

    let rows: Vec<MetricsRow> = cells.iter().map(|c| MetricsRow::new(&c.config, &c.episode)).collect();
    write_metrics_csv(create_file(out, "metrics.csv")?, &rows)?;
    let trace_dir = out.join("traces");
    for c in &cells {
        let w = create_file(&trace_dir, &trace_name(c.policy, c.config.seed))?;
        write_trace_jsonl(w, &c.episode.trace.records)?;
    }

    let mut sums: Vec<(Policy, Summary)> = cfg.policies.iter().map(|&p| (p, Summary::default())).collect();
    for c in &cells {
        let lat = latency(cfg, c)?;
        let (_, s) = sums.iter_mut().find(|(p, _)| *p == c.policy).expect("policy in list");
        let m = &c.episode.metrics;
        s.n += 1.0;
        s.rate += m.cloud_call_rate;
        s.episodes += m.episodes as f64;
        s.steps += m.steps as f64;
        s.total_ms += lat.total_ms;
    }
    println!(
        "{:<22} {:>15} {:>10} {:>10} {:>12}",
        "policy", "cloud_call_rate", "episodes", "steps", "total_ms"
    );
    for (p, s) in &sums {
        println!(
            "{:<22} {:>15.4} {:>10.2} {:>10.2} {:>12.3}",
            p.to_string(),
            s.rate / s.n,
            s.episodes / s.n,
            s.steps / s.n,
            s.total_ms / s.n
        );
    }
    println!("wrote {} traces to {}", cells.len(), out.display());
    Ok(())
}

fn sweep(cfg: &RunConfig, jobs: usize) -> Result<(), CliError> {
    let grid = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("sweep: block missing".into()))?;
    let configs = grid.expand(&cfg.decode).map_err(|e| CliError::Config(format!("sweep: {e}")))?;
    let cells = run_all(cfg, &configs, &cfg.policies, jobs)?;
    let rows: Vec<MetricsRow> = cells.iter().map(|c| MetricsRow::new(&c.config, &c.episode)).collect();
    write_metrics_csv(create_file(&cfg.output_dir, "sweep.csv")?, &rows)?;

    // Mean cloud_call_rate per (tau, rho, K, policy); cells are sorted by key.
    println!("{:<12} {:>8} {:>8} {:>4} {:>15}", "policy", "tau", "rho", "K", "cloud_call_rate");
    for &policy in &cfg.policies {
        let mut taus = Vec::new();
        let mut rates = Vec::new();
        let mine: Vec<&Cell> = cells.iter().filter(|c| c.policy == policy).collect();
        let mut i = 0;
        while i < mine.len() {
            let key = |c: &Cell| (c.config.tau, c.config.rho, c.config.k);
            let k0 = key(mine[i]);
            let group: Vec<&&Cell> = mine[i..].iter().take_while(|c| key(c) == k0).collect();
            let mean = group.iter().map(|c| c.episode.metrics.cloud_call_rate).sum::<f64>() / group.len() as f64;
            println!("{:<12} {:>8} {:>8} {:>4} {:>15.4}", policy.to_string(), k0.0, k0.1, k0.2, mean);
            taus.push(k0.0);
            rates.push(mean);
            i += group.len();
        }
        if let Some(r) = spearman(&taus, &rates) {
            println!("{policy}: spearman(tau, cloud_call_rate) = {r:.4}");
        }
    }
    println!("wrote {} rows to {}", rows.len(), cfg.output_dir.join("sweep.csv").display());
    Ok(())
}

fn netsim(cfg: &RunConfig, jobs: usize) -> Result<(), CliError> {
    let configs = seed_configs(cfg);
    let policies = [Policy::Ciar, Policy::Uniform];
    let cells = run_all(cfg, &configs, &policies, jobs)?;
    let profiles = builtin_profiles();

    let mut w = csv_writer(create_file(&cfg.output_dir, "netsim.csv")?);
    let mut header: Vec<&str> = METRICS_HEADER.to_vec();
    header.extend(["network", "device_ms", "cloud_ms", "comm_ms", "total_ms", "comm_ratio"]);
    w.write_record(&header).map_err(csv_err)?;

    let mut means: Vec<(Policy, &str, f64, f64, f64, f64)> = Vec::new();
    for &policy in &policies {
        for name in profiles.keys() {
            means.push((policy, name, 0.0, 0.0, 0.0, 0.0));
        }
    }
    for c in &cells {
        let row = MetricsRow::new(&c.config, &c.episode);
        for (name, profile) in &profiles {
            let lat = episode_latency(&c.episode.trace, profile, &c.config.payload, &cfg.compute)?;
            let mut rec = vec![
                row.seed.to_string(),
                row.policy.clone(),
                row.tau.to_string(),
                row.rho.to_string(),
                row.k.to_string(),
                row.cloud_call_rate.to_string(),
                row.episodes.to_string(),
                row.steps.to_string(),
                row.device_accepts.to_string(),
            ];
            rec.extend([
                name.to_string(),
                lat.device_ms.to_string(),
                lat.cloud_ms.to_string(),
                lat.comm_ms().to_string(),
                lat.total_ms.to_string(),
                lat.comm_ratio.to_string(),
            ]);
            w.write_record(&rec).map_err(csv_err)?;
            let m = means
                .iter_mut()
                .find(|m| m.0 == c.policy && m.1 == *name)
                .expect("policy and profile listed");
            m.2 += 1.0;
            m.3 += lat.comm_ms();
            m.4 += lat.total_ms;
            m.5 += lat.comm_ratio;
        }
    }
    w.flush()?;

    println!("{:<10} {:<6} {:>12} {:>12} {:>11}", "policy", "network", "comm_ms", "total_ms", "comm_ratio");
    for (policy, name, n, comm, total, ratio) in &means {
        println!(
            "{:<10} {:<6} {:>12.3} {:>12.3} {:>11.4}",
            policy.name(),
            name,
            comm / n,
            total / n,
            ratio / n
        );
    }
    Ok(())
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(w)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Run(format!("csv: {e}"))
}

fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let t = cfg
        .training
        .ok_or_else(|| CliError::Config("training: block missing".into()))?;
    let params = cfg.model_params()?;
    let data = harvest_dataset(
        &cfg.scene,
        &params,
        t.dataset_size,
        t.batch_size,
        TRAIN_SCENE_OFFSET.wrapping_add(t.seed),
    )?;
    let init = InterHeadParams::init_random(params.vocab_size, params.head_input_dim(), t.radius_init, t.seed);
    let (head, report) = train_head(&init, &data, &t).map_err(|e| match e {
        Error::Diverged { step, loss } => CliError::Run(format!("training diverged at step {step} (loss {loss})")),
        other => other.into(),
    })?;

    let out = &cfg.output_dir;
    let mut w = create_file(out, "inter_head.bin")?;
    head.write_binary(&mut w)?;
    w.flush()?;
    write_loss_csv(create_file(out, "loss.csv")?, &report.history)?;

    let (k0, k1) = (report.initial_kl(), report.final_loss.mean_kl);
    println!("initial KL {k0:.6}");
    println!("final KL   {k1:.6} ({:.1}% of initial)", 100.0 * k1 / k0);
    println!("wrote {} and {}", out.join("inter_head.bin").display(), out.join("loss.csv").display());
    Ok(())
}

fn verify(seed: u64, sizes: &[usize], cases: usize) -> Result<(), CliError> {
    if sizes.is_empty() || sizes.iter().any(|&n| n < 2) {
        return Err(CliError::Config("--sizes: every size must be at least 2".into()));
    }
    let settings = VerifySettings {
        seed,
        sizes: sizes.to_vec(),
        cases,
    };
    let reports = run_suite(&settings);
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} properties passed (seed {seed})", reports.len());
        Ok(())
    } else {
        Err(CliError::Run(format!("properties failed: {}", failed.join(", "))))
    }
}
