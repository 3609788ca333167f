use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use steplab::harness::ablation::{run_ablations, sweep_queries, sweep_retrieval};
use steplab::harness::io::write_csv;
use steplab::harness::pipeline::{RFT_CKPT, RL_CKPT, SFT_CKPT};
use steplab::harness::{ExperimentConfig, Runner};
use steplab::{LabError, Params, Result};

#[derive(Parser)]
#[command(name = "steplab", version, about = "Process-supervised RL laboratory")]
struct Cli {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints and tables.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the world and the train and eval question splits.
    GenWorld,
    /// Supervised warmup on oracle trajectories.
    Sft,
    /// Tree search from the warmup policy; writes sibling preference pairs.
    Search,
    /// Train the step verifier on the preference pairs.
    TrainPrm,
    /// Verifier-filtered rejection-sampling fine-tuning.
    Rft,
    /// Group policy optimization with dual-granularity advantages.
    TrainRl,
    /// Evaluate every policy checkpoint in the output directory.
    Eval,
    /// Run the variant comparison and the reward-weight sweep over several seeds.
    Ablate,
    /// Evaluate one checkpoint across retrieval depths.
    SweepK {
        /// Checkpoint file in the output directory; the latest stage by default.
        #[arg(long)]
        checkpoint: Option<String>,
        /// Questions per hop depth.
        #[arg(long, default_value_t = 50)]
        per_hop: usize,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::GenWorld => "gen-world",
            Command::Sft => "sft",
            Command::Search => "search",
            Command::TrainPrm => "train-prm",
            Command::Rft => "rft",
            Command::TrainRl => "train-rl",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::SweepK { .. } => "sweep-k",
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn latest_checkpoint(out: &Path) -> Result<PathBuf> {
    [RL_CKPT, RFT_CKPT, SFT_CKPT]
        .iter()
        .map(|f| out.join(f))
        .find(|p| p.exists())
        .ok_or_else(|| LabError::MissingCheckpoint {
            stage: "sweep-k",
            path: out.join(SFT_CKPT).display().to_string(),
        })
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli).map_err(|e| e.in_stage("config"))?;
    let out = cli.out.as_path();
    let mut r = Runner::new(&cfg, out)?;
    match &cli.command {
        Command::GenWorld => {
            r.gen_world()?;
            println!(
                "{} facts, {} train and {} eval questions",
                r.lab.world.facts.len(),
                r.lab.train.len(),
                r.lab.eval.len()
            );
        }
        Command::Sft => {
            r.sft()?;
        }
        Command::Search => {
            let pairs = r.search()?;
            println!("{} preference pairs", pairs.len());
        }
        Command::TrainPrm => {
            r.train_prm()?;
        }
        Command::Rft => {
            r.rft()?;
        }
        Command::TrainRl => {
            r.train_rl()?;
        }
        Command::Eval => {
            for e in r.eval()? {
                println!(
                    "{:<4} em {:.4} f1 {:.4} format {:.4}",
                    e.stage, e.em, e.f1, e.format_rate
                );
            }
        }
        Command::Ablate => {
            let rep = run_ablations(&cfg)?;
            rep.write(out)?;
            print!("{}", rep.text());
        }
        Command::SweepK { checkpoint, per_hop } => {
            let path = match checkpoint {
                Some(f) => out.join(f),
                None => latest_checkpoint(out)?,
            };
            let policy = Params::load(&path)?;
            let qs = sweep_queries(&r.lab, *per_hop)?;
            let rows = sweep_retrieval(&r.lab, &policy, &qs, &cfg.ablation.k_grid)?;
            write_csv(&out.join("sweep_k.csv"), &rows)?;
            for row in rows {
                println!(
                    "k={} hops={} n={} em {:.4} f1 {:.4}",
                    row.k_docs, row.hops, row.n, row.em, row.f1
                );
            }
        }
    }
    if !matches!(cli.command, Command::Ablate) {
        r.log
            .write_csv(&out.join(format!("metrics_{}.csv", cli.command.stage())))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.in_stage(cli.command.stage()));
            ExitCode::FAILURE
        }
    }
}
