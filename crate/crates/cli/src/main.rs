use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rddp_cli::{cmd_montecarlo, cmd_plan, cmd_simulate, CliError, RunConfig};
use rddp_core::backward::{QMethod, StrategyChoice};

#[derive(Parser)]
#[command(name = "rddp", version, about = "Robust DDP planning with LMI backward passes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan from the configured start state; exit 2 if not converged.
    Plan(Common),
    /// Replay a stored plan on the true plant under the configured sample.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Plan file; defaults to `<out>/plan.json`.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Robust versus nominal planning over sampled friction and start states.
    Montecarlo(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    /// simple | dual | canonical | auto
    #[arg(long)]
    strategy: Option<StrategyChoice>,
    /// taylor | linearized
    #[arg(long)]
    qmethod: Option<QMethod>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(o) = &self.out {
            cfg.output = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.experiment.seed = s;
        }
        if let Some(n) = self.samples {
            cfg.experiment.samples = n;
        }
        if let Some(s) = self.strategy {
            cfg.planner.strategy = s;
        }
        if let Some(q) = self.qmethod {
            cfg.planner.qmethod = q;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Plan(c) => {
            let cfg = c.load()?;
            let p = cmd_plan(&cfg)?;
            println!("{}", cfg.output.join("plan.json").display());
            Ok(if p.is_converged() { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Simulate { common, plan } => {
            let cfg = common.load()?;
            let path = plan.unwrap_or_else(|| cfg.output.join("plan.json"));
            let r = cmd_simulate(&cfg, &path)?;
            println!("cost {} terminal_norm {} bound {}", r.cost, r.terminal_norm, r.certified_bound);
            Ok(ExitCode::SUCCESS)
        }
        Command::Montecarlo(c) => {
            let cfg = c.load()?;
            let s = cmd_montecarlo(&cfg)?;
            for (name, m) in [("nominal", &s.nominal), ("robust", &s.robust)] {
                println!("{name}: mean {:.4} std {:.4} failures {}/{}", m.mean, m.std, m.failures, s.samples);
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
