//! `biovlm`: command-line front end of the prompt-bank engine.

use std::path::PathBuf;
use std::process::ExitCode;

use biovlm_core::config::RunConfig;
use biovlm_core::evalharness::ProtocolKind;
use biovlm_core::fidelity::TOLERANCE;
use biovlm_core::{runs, Error};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "biovlm", version, about = "Entropy-selected prompt-bank learning over frozen encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic task and write it as a bundle.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a prompt bank.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint under one protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        protocol: ProtocolKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every aggregation strategy.
    AblateSelect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the eight-row loss-term grid.
    AblateLoss {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate once per prompt count.
    SweepPrompts {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "N-list", value_delimiter = ',', default_value = "1,2,5,10,20,50,100")]
        n_list: Vec<usize>,
        /// Defaults to the config's output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss term.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::GenData { spec, out, seed } => {
            let mut cfg = RunConfig::load(&spec)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            runs::gen_data(&cfg, &out)?;
        }
        Command::Train { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let fitted = runs::train_cmd(&cfg, &data, &out)?;
            if let Some(last) = fitted.log.rows.last() {
                println!("trained {} steps, final loss {:.6}", last.step + 1, last.loss.total);
            }
        }
        Command::Eval {
            checkpoint,
            data,
            protocol,
            out,
        } => {
            let report = runs::eval_cmd(&checkpoint, &data, protocol, &out)?;
            print!("{}", report.table().to_csv()?);
        }
        Command::AblateSelect { checkpoint, data, out } => {
            print!("{}", runs::ablate_select(&checkpoint, &data, &out)?.to_csv()?);
        }
        Command::AblateLoss { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            print!("{}", runs::ablate_loss(&cfg, &data, &out)?.to_csv()?);
        }
        Command::SweepPrompts {
            config,
            data,
            n_list,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output.dir.clone());
            print!("{}", runs::sweep_prompts(&cfg, &data, &n_list, &out)?.to_csv()?);
        }
        Command::Gradcheck { config } => {
            let cfg = RunConfig::load(&config)?;
            let results = runs::gradcheck(&cfg)?;
            println!("term,max_rel_error,checked,status");
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{},{:.3e},{},{status}", r.name, r.max_rel_error, r.checked);
            }
            runs::require_passed(&results)?;
            println!("all terms below {TOLERANCE:e}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
