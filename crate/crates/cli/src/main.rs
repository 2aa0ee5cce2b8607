use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lea_core::config::{EnvKind, ExperimentConfig};
use lea_core::experiment;
use lea_core::policy::Mode;
use lea_core::{Error, Result};

/// Offline RL sequential recommendation with a language-model environment.
#[derive(Parser)]
#[command(name = "lea", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed (overrides hyper.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training variant, e.g. normal, base, lea, ler, les, leasr.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// surrogate, bridge or fixed-reward.
    #[arg(long, global = true)]
    env: Option<String>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Filter and split the event log; writes prep.jsonl.
    Prep,
    /// Pre-train the language model and learn item tokens.
    Tokenize,
    /// Fine-tune the environment adapter on the environment subset.
    FinetuneLe,
    /// Train a policy and evaluate it on the test split.
    Train,
    /// Evaluate the saved policy on the test split.
    Eval,
    /// Train over the ablation grid and print mean metrics per value.
    Ablate,
    /// Write a synthetic event log and catalog into --out.
    Synth,
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.hyper.seed = s;
    }
    if let Some(m) = &cli.mode {
        cfg.model.mode = m.parse::<Mode>()?;
    }
    if let Some(e) = &cli.env {
        cfg.model.env = e.parse::<EnvKind>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    let out = &cli.out;
    match cli.command {
        Command::Prep => {
            let s = experiment::run_prep(&cfg, out)?;
            println!(
                "{} items, {} interactions; sessions: {} train, {} validation, {} test, {} environment subset",
                s.items, s.interactions, s.train, s.validation, s.test, s.le_subset
            );
        }
        Command::Tokenize => {
            let r = experiment::run_tokenize(&cfg, out)?;
            let n = r.len().max(1) as f64;
            let before: f64 = r.iter().map(|t| t.nll_before).sum::<f64>() / n;
            let after: f64 = r.iter().map(|t| t.nll_after).sum::<f64>() / n;
            let better = r.iter().filter(|t| t.nll_after < t.nll_before).count();
            println!(
                "{} items tokenized; mean description NLL {before:.4} -> {after:.4}; improved for {better}",
                r.len()
            );
        }
        Command::FinetuneLe => {
            let s = experiment::run_finetune(&cfg, out)?;
            for e in &s.epochs {
                println!("epoch {:>3}  rm {:.4}  sm {:.4}", e.epoch, e.rm, e.sm);
            }
            if let Some(q) = s.quality {
                println!(
                    "held-out reward accuracy {:.4}, state accuracy {:.4}",
                    q.reward_accuracy, q.state_accuracy
                );
            }
        }
        Command::Train | Command::Eval => {
            let report = if matches!(cli.command, Command::Train) {
                experiment::run_train(&cfg, out)?
            } else {
                experiment::run_eval(&cfg, out)?
            };
            print!("{}", report.table());
        }
        Command::Ablate => {
            let rows = experiment::run_ablate(&cfg, out)?;
            print!("{}", experiment::ablation_table(&cfg.ablate.param, &rows));
        }
        Command::Synth => {
            let w = experiment::run_synth(&cfg, out)?;
            println!(
                "{} items, {} sessions written to {}",
                w.items.len(),
                w.users.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn one_line(e: &Error) -> String {
    e.to_string().replace(['\n', '\r'], " ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), one_line(&e));
            ExitCode::FAILURE
        }
    }
}
