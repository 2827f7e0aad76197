use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use koopman_cli::{cmd_collect, cmd_identify, cmd_mpc, cmd_noise, cmd_predict, RunConfig};

#[derive(Parser)]
#[command(name = "koopman", version, about = "Koopman identification and MPC experiments on simulated plants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate randomized-ramp training trials and write them as CSV.
    Collect(Common),
    /// Characterize period-to-period output spread under sinusoid inputs.
    Noise(Common),
    /// Identify the Koopman model (lambda sweep) and the linear baseline.
    Identify(Common),
    /// Compare 2.5 s prediction errors of both models on sinusoid data.
    Predict(Common),
    /// Run K-MPC and L-MPC on the tracking tasks.
    Mpc(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the master seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> anyhow::Result<String> {
    let (name, common) = match &cli.command {
        Command::Collect(c) => ("collect", c),
        Command::Noise(c) => ("noise", c),
        Command::Identify(c) => ("identify", c),
        Command::Predict(c) => ("predict", c),
        Command::Mpc(c) => ("mpc", c),
    };
    let cfg = common.resolve()?;
    let out = Some(common.out.as_path());
    let line = match &cli.command {
        Command::Collect(_) => {
            let trials = cmd_collect(&cfg, out)?;
            format!("{} trials, {} samples", trials.len(), trials.iter().map(|t| t.len()).sum::<usize>())
        }
        Command::Noise(_) => {
            let r = cmd_noise(&cfg, out)?;
            format!(
                "spread std {:.4}, noise floor {:.4}, {:.1}% within 2 std",
                r.spread_std,
                r.noise_floor(),
                100.0 * r.within_two_std
            )
        }
        Command::Identify(_) => {
            let m = cmd_identify(&cfg, out)?;
            format!("lambda {} chosen, A_hat density {:.3}", m.koopman.lambda, m.koopman.density)
        }
        Command::Predict(_) => {
            let t = cmd_predict(&cfg, out)?;
            format!(
                "mean error koopman {:.4}, linear-ss {:.4}",
                t.average("koopman").unwrap_or(f64::NAN),
                t.average("linear-ss").unwrap_or(f64::NAN)
            )
        }
        Command::Mpc(_) => {
            let runs = cmd_mpc(&cfg, out)?;
            runs.iter()
                .map(|r| format!("{} {} {:.4}", r.controller, r.summary.task, r.summary.mean_error))
                .collect::<Vec<_>>()
                .join("; ")
        }
    };
    Ok(format!("{name}: {line} -> {}", common.out.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = format!("{e:#}");
            eprintln!("{}", serde_json::json!({ "status": "error", "error": msg }));
            ExitCode::FAILURE
        }
    }
}
