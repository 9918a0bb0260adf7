use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use segrl_core::config::RunConfig;
use segrl_core::{harness, Error};

#[derive(Parser)]
#[command(name = "segrl", version, about = "Segmented-rollout RL at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the policy and write metrics, snapshots and a manifest.
    Train(Common),
    /// Predict rollout speedup per segment count.
    Simulate(Common),
    /// Filter a JSONL dataset.
    Clean(Common),
    /// Sample k answers per question and report avg@k.
    Eval(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to runs/<command>-<seed>.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<String, (i32, String)> {
    let (name, common) = match &cli.command {
        Cmd::Train(c) => ("train", c),
        Cmd::Simulate(c) => ("simulate", c),
        Cmd::Clean(c) => ("clean", c),
        Cmd::Eval(c) => ("eval", c),
    };
    // an unreadable config is a usage problem, not a runtime failure
    let mut cfg = RunConfig::load(&common.config).map_err(|e| (1, e.to_string()))?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out = common.out.clone().unwrap_or_else(|| harness::default_out(name, cfg.seed));
    let fail = |e: Error| (e.exit_code(), e.to_string());
    let msg = match cli.command {
        Cmd::Train(_) => {
            harness::cmd_train(&cfg, &out).map_err(fail)?;
            format!("train: wrote {}", out.display())
        }
        Cmd::Simulate(_) => {
            harness::cmd_simulate(&cfg, &out).map_err(fail)?;
            format!("simulate: wrote {}", out.display())
        }
        Cmd::Clean(_) => {
            let r = harness::cmd_clean(&cfg, &out).map_err(fail)?;
            format!("{}clean: wrote {}", r.summary(), out.display())
        }
        Cmd::Eval(_) => {
            let r = harness::cmd_eval(&cfg, &out).map_err(fail)?;
            format!("eval: avg@{} = {:.4}, wrote {}", r.k, r.accuracy, out.display())
        }
    };
    Ok(msg)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code as u8)
        }
    }
}
