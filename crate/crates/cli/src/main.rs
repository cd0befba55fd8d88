use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mtnn_cli::config::parse_variant_list;
use mtnn_cli::{cmd_eval, cmd_gen_data, cmd_mpc, cmd_train, ExperimentConfig, Variant};

#[derive(Parser)]
#[command(name = "mtnn", version, about = "Monotonic Taylor neural network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate or ingest a data set and write the train/test CSVs.
    GenData(Common),
    /// Train model variants.
    Train {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset, e.g. `taylor1,mono1`.
        #[arg(long, value_parser = parse_variant_list)]
        variants: Option<Vec<Variant>>,
    },
    /// Multi-step rollout table on the test set.
    Eval(Common),
    /// Closed-loop run with a trained model.
    Mpc(Common),
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.load()?;
            let m = cmd_gen_data(&cfg)?;
            println!(
                "wrote {} train / {} test transitions to {}",
                m.n_train,
                m.n_test,
                cfg.data_dir().display()
            );
            Ok(true)
        }
        Command::Train { common, variants } => {
            let cfg = common.load()?;
            let variants = variants.unwrap_or_else(|| cfg.variants.clone());
            let report = cmd_train(&cfg, &variants)?;
            for o in &report.outcomes {
                match &o.result {
                    Ok(s) => println!(
                        "{:9} lr {:e}  train mse {:.3e}  best epoch {}",
                        o.variant.name(),
                        s.learning_rate,
                        s.train_mse,
                        s.best_epoch
                    ),
                    Err(e) => eprintln!("{:9} FAILED: {e}", o.variant.name()),
                }
            }
            Ok(report.all_ok())
        }
        Command::Eval(c) => {
            let cfg = c.load()?;
            let report = cmd_eval(&cfg)?;
            for v in &report.missing {
                eprintln!("no bundle for {v}; skipped");
            }
            print!("{}", report.table.to_csv());
            Ok(report.missing.is_empty())
        }
        Command::Mpc(c) => {
            let cfg = c.load()?;
            let report = cmd_mpc(&cfg)?;
            let faults = report.trace.rows.iter().filter(|r| r.fault.is_some()).count();
            println!(
                "{} steps, final state {:?}, {faults} solver faults; trace in {}",
                report.trace.rows.len(),
                report.trace.final_state,
                report.trace_path.display()
            );
            Ok(faults == 0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
