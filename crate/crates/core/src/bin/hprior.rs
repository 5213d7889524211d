use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hindsight_prior::envs::EnvConfig;
use hindsight_prior::oracle::{HumanBridge, OracleKind};
use hindsight_prior::runner::{self, Method, QueryService, RunConfig, RunOptions};

#[derive(Parser)]
#[command(name = "hprior", version, about = "Preference-based RL with hindsight priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its run directory.
    Train {
        /// JSON run configuration; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// keydoor | pointmass
        #[arg(long)]
        env: Option<String>,
        /// prior | rvar | nrp | bisim | none | prior-only | reference
        #[arg(long)]
        method: Option<Method>,
        /// perfect | mistake:<eps> | human
        #[arg(long)]
        oracle: Option<OracleKind>,
        #[arg(long)]
        seed: Option<u64>,
        /// Total environment steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Serve the query API on this port.
        #[arg(long)]
        serve: Option<u16>,
        /// Run directory (default: runs/<env>-<method>-<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Normalize runs against reference runs and compare methods.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> hindsight_prior::Result<()> {
    match cli.command {
        Command::Train { config, env, method, oracle, seed, steps, serve, out } => {
            let mut cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            if let Some(e) = env {
                cfg.env = EnvConfig::by_name(&e)?;
                if let EnvConfig::PointMass(pm) = &mut cfg.env {
                    pm.discrete_actions = true;
                }
            }
            if let Some(m) = method {
                cfg.method = m;
            }
            if let Some(o) = oracle {
                cfg.oracle = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.total_steps = s;
            }
            let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}-{}", cfg.env.name(), cfg.method, cfg.seed)));
            let bridge = (cfg.oracle == OracleKind::Human || serve.is_some()).then(HumanBridge::new);
            let service = match serve {
                Some(port) => {
                    std::fs::create_dir_all(&out)?;
                    let svc = QueryService::start(&format!("127.0.0.1:{port}"), bridge.clone().expect("bridge"), Some(out.join("metrics.csv")))?;
                    log::info!("query service on http://127.0.0.1:{}", svc.port());
                    Some(svc)
                }
                None => None,
            };
            let record = runner::train(&cfg, RunOptions { out_dir: Some(out.clone()), bridge })?;
            if let Some(svc) = service {
                svc.shutdown();
            }
            let last = record.metrics.iter().rev().take(cfg.eval_episodes).collect::<Vec<_>>();
            let n = last.len().max(1) as f64;
            println!(
                "{}: final return {:.3}, success {:.2}, {} labels -> {}",
                cfg.method,
                last.iter().map(|m| m.eval_return).sum::<f64>() / n,
                last.iter().map(|m| m.eval_success as f64).sum::<f64>() / n,
                record.dataset_size,
                out.display()
            );
        }
        Command::Report { runs, out } => {
            let summaries = runs.iter().map(|d| runner::load_run(d)).collect::<hindsight_prior::Result<Vec<_>>>()?;
            let rep = runner::report(&summaries)?;
            rep.write(&out)?;
            for m in &rep.methods {
                let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.3}"));
                println!(
                    "{:<20} {:<10} runs {:>2}  norm. return {:>7}  norm. success {:>7}",
                    m.group,
                    m.env,
                    m.runs,
                    fmt(m.mean_normalized_return),
                    fmt(m.mean_normalized_success)
                );
            }
            for t in &rep.tests {
                println!("{} vs {} ({}, {}): t = {:.3}, p = {:.4}, df = {}", t.a, t.b, t.env, t.metric, t.t, t.p, t.df);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
