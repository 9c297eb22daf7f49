//! Thin command-line front end over the `pointstack` library.
//!
//! Errors exit nonzero after printing one machine-readable line to stderr:
//! `error: code=<code> message="<text>"`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pointstack::commands::{
    cmd_ablate, cmd_eval, cmd_gradcheck, cmd_permtest, cmd_train, GradCheckModule,
};

#[derive(Parser)]
#[command(
    name = "pointstack",
    about = "Train and probe multi-resolution point-cloud models with learnable pooling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file; writes metrics.log and model.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the checkpoint and metrics log.
        #[arg(long, default_value = "pointstack-out")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train every pooling/stacking toggle combination over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Number of training seeds (starting at the config seed).
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Measure the spread of test accuracy under input-order permutations.
    Permtest {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of random permutation rounds.
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Evaluate on this dataset directory instead of the one embedded in
        /// the checkpoint config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare recorded gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
    },
}

fn run(cli: Cli) -> pointstack::Result<bool> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let summary = cmd_train(&config, seed, &out, false)?;
            println!(
                "record kind=train epochs={} train_oa={:.6} wall_seconds={:.1}",
                summary.run.epochs_run, summary.run.final_train_oa, summary.run.wall_seconds
            );
            println!("{}", summary.run.final_test.record_line("final-test"));
            println!("checkpoint written to {}", summary.checkpoint_path.display());
            println!("metrics log written to {}", summary.log_path.display());
            Ok(true)
        }
        Command::Eval { checkpoint, data } => {
            let report = cmd_eval(&checkpoint, &data)?;
            println!("{}", report.record_line("eval"));
            println!(
                "overall accuracy {:.4}, mean class accuracy {:.4}{}",
                report.overall_accuracy,
                report.mean_class_accuracy,
                report
                    .instance_miou
                    .map(|m| format!(", instance mIoU {m:.4}"))
                    .unwrap_or_default()
            );
            Ok(true)
        }
        Command::Ablate { config, seeds } => {
            let table = cmd_ablate(&config, seeds)?;
            print!("{}", table.format_table());
            for row in &table.rows {
                println!(
                    "record kind=ablation flags=\"{}\" mean_oa={:.6} std_oa={:.6} mean_macc={:.6} std_macc={:.6}",
                    row.flags.label(),
                    row.mean_oa,
                    row.std_oa,
                    row.mean_macc,
                    row.std_macc
                );
            }
            Ok(true)
        }
        Command::Permtest { checkpoint, n, data } => {
            let report = cmd_permtest(&checkpoint, n, data.as_deref())?;
            println!("{}", report.record_line());
            println!(
                "OA over {} permutation rounds: mean {:.4}, std {:.4}",
                report.accuracies.len(),
                report.mean_oa,
                report.std_oa
            );
            Ok(true)
        }
        Command::Gradcheck { module } => {
            let module = GradCheckModule::parse(&module)?;
            let outcomes = cmd_gradcheck(module)?;
            let mut all_ok = true;
            for o in &outcomes {
                println!("{}", o.line());
                all_ok &= o.passed();
            }
            println!(
                "gradcheck summary: {}/{} checks passed",
                outcomes.iter().filter(|o| o.passed()).count(),
                outcomes.len()
            );
            Ok(all_ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: code={} message=\"{}\"", e.code(), e);
            ExitCode::FAILURE
        }
    }
}
