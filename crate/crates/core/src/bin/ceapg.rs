use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ceapg::error::exit_code;
use ceapg::harness::{self, config, RunConfig};
use ceapg::policy;
use ceapg::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ceapg",
    version,
    about = "Cross-entropy analytic policy gradient training and analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment: cartpole, acrobot, or double_cartpole.
    #[arg(long)]
    env: Option<String>,
    /// Seed; repeat for several.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel workers for candidate evaluation.
    #[arg(long)]
    workers: Option<usize>,
    /// Override a configuration key, e.g. `--set cem.k_a=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy per seed.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a saved policy and write trajectories.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        /// Rollouts per seed.
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Scan returns along a random parameter direction.
    Landscape {
        #[command(flatten)]
        common: Common,
        /// Policy to perturb; a random policy is used when absent.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        half_range: f64,
        /// Odd number of grid points.
        #[arg(long, default_value_t = 101)]
        samples: usize,
    },
    /// Compare BPTT gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        horizon: usize,
        #[arg(long, default_value_t = 20)]
        coords: usize,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    let mut pairs = Vec::new();
    if let Some(env) = &common.env {
        pairs.push(("env".to_string(), env.clone()));
    }
    for o in &common.overrides {
        pairs.push(config::parse_override(o)?);
    }
    if !common.seeds.is_empty() {
        let list: Vec<String> = common.seeds.iter().map(u64::to_string).collect();
        pairs.push(("seeds".into(), list.join(",")));
    }
    if let Some(out) = &common.out {
        pairs.push(("out".into(), out.display().to_string()));
    }
    if let Some(w) = common.workers {
        pairs.push(("workers".into(), w.to_string()));
    }
    RunConfig::from_sources(text.as_deref(), &pairs)
}

fn load(path: &Path) -> Result<(policy::PolicyArch, policy::ParamVector)> {
    policy::load_policy(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = resolve(&common)?;
            let report = harness::cmd_train(&cfg, &mut |line| eprintln!("{line}"))?;
            for (s, best) in &report.per_seed {
                println!("seed {s}: best return {best}");
            }
            println!(
                "best return {} ± {} over {} seeds",
                report.mean,
                report.std,
                report.per_seed.len()
            );
        }
        Command::Rollout {
            common,
            policy,
            count,
        } => {
            let cfg = resolve(&common)?;
            let (arch, theta) = load(&policy)?;
            let report =
                harness::cmd_rollout(&cfg.env, &arch, &theta, &cfg.seeds, count, Some(&cfg.out))?;
            let (bal, _) = harness::mean_std(&report.balance);
            println!(
                "return {} ± {} over {} rollouts; balance {:.3}",
                report.mean,
                report.std,
                report.returns.len(),
                bal
            );
        }
        Command::Landscape {
            common,
            policy,
            half_range,
            samples,
        } => {
            let cfg = resolve(&common)?;
            let s = cfg.seeds[0];
            let (arch, theta) = match policy {
                Some(p) => load(&p)?,
                None => {
                    let arch = cfg.arch();
                    let theta = harness::random_policy(&arch, s);
                    (arch, theta)
                }
            };
            let path = cfg.out.join("landscape.csv");
            let rows = harness::cmd_landscape(
                &cfg.env,
                &arch,
                &theta,
                s,
                half_range,
                samples,
                Some(&path),
            )?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        Command::Gradcheck {
            mut common,
            horizon,
            coords,
        } => {
            common.overrides.push(format!("env.horizon={horizon}"));
            let cfg = resolve(&common)?;
            let report = harness::cmd_gradcheck(&cfg.env, &cfg.arch(), &cfg.seeds, coords)?;
            for (s, rel) in &report.per_seed {
                println!("seed {s}: max relative error {rel:e}");
            }
            println!(
                "horizon {}: max relative error {:e}",
                report.horizon, report.max_rel
            );
            report.enforce()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
