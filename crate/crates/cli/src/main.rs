use std::path::PathBuf;

use anyhow::{Context, Result};
use ccl_cli::{run_grid, run_seeds};
use ccl_core::config::parse_config;
use ccl_core::graph::build_topology;
use ccl_core::TopologyKind;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "ccl",
    version,
    about = "Decentralized training with cross-feature contrastive loss"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration for each of its seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `key=value`, dotted keys reach nested tables (`topology.kind=torus`).
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run every cell of the config's `[grid]` over its seeds.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Print a topology's mixing matrix and spectral gap.
    InspectTopology {
        #[arg(long)]
        kind: TopologyKind,
        #[arg(long)]
        n: usize,
        /// Damping: W' = (1 - gamma) I + gamma W.
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Also write the matrix as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            overrides,
            output_dir,
        } => {
            let cfg = parse_config(&config, &overrides)
                .with_context(|| format!("loading {}", config.display()))?;
            let out = output_dir.unwrap_or_else(|| cfg.output_dir.clone());
            for s in run_seeds(&cfg, &out)? {
                println!(
                    "seed {}: {} rounds, consensus test accuracy {:.4}, loss {:.4}, bytes {}, compute overhead {:.3}",
                    s.seed, s.rounds, s.final_test_accuracy, s.final_test_loss, s.total_bytes, s.compute_overhead
                );
            }
            println!("outputs in {}", out.display());
        }
        Command::Grid {
            config,
            overrides,
            output_dir,
        } => {
            let cfg = parse_config(&config, &overrides)
                .with_context(|| format!("loading {}", config.display()))?;
            let out = output_dir.unwrap_or_else(|| cfg.output_dir.clone());
            let report = run_grid(&cfg, &out)?;
            print!("{}", report.table());
            println!("outputs in {}", out.display());
        }
        Command::InspectTopology {
            kind,
            n,
            gamma,
            csv,
        } => {
            let t = build_topology(kind, n)?;
            let w = t.uniform_mixing().damped(gamma);
            w.check_invariants()?;
            println!("{} with {} agents, {} edges", kind, n, t.edges().len());
            for i in 0..n {
                let row: Vec<String> = w.row(i).iter().map(|v| format!("{v:.4}")).collect();
                println!("{}", row.join(" "));
            }
            println!("spectral gap: {:.6}", w.spectral_gap()?);
            if let Some(path) = csv {
                w.write_csv(
                    std::fs::File::create(&path)
                        .with_context(|| format!("creating {}", path.display()))?,
                )?;
            }
        }
    }
    Ok(())
}
