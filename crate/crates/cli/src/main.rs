use std::path::PathBuf;
use std::process::ExitCode;

use bfno_cli::{cmd_ablate, cmd_eval, cmd_gradcheck, cmd_train, tune_allocator, CliError};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bfno", version, about = "Train and inspect BFNO-NODE classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, the resolved config and a parameter snapshot
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report test accuracy of a parameter snapshot
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        params: PathBuf,
    },
    /// Check gradients against finite differences and the discrete backward pass
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Corrupt the channel-map weight VJP (test hook)
        #[arg(long, hide = true)]
        inject_vjp_fault: bool,
    },
    /// Train once per sweep point, e.g. `L=1,2,4,8` or `variant=BFNO,FNO,CONV`
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sweep: String,
        #[arg(long)]
        out: PathBuf,
        /// Run sweep points concurrently
        #[arg(long)]
        parallel: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out } => {
            let outcome = cmd_train(&config, &out)?;
            if let Some(last) = outcome.rows.last() {
                println!("final test_acc {}", last.test_acc);
            }
            println!("wrote {}", out.display());
        }
        Command::Eval { config, params } => {
            let acc = cmd_eval(&config, &params)?;
            println!("test_acc {acc}");
        }
        Command::Gradcheck { config, inject_vjp_fault } => {
            let report = cmd_gradcheck(&config, inject_vjp_fault)?;
            println!(
                "finite differences: max relative error {:.3e} at {}[{}] over {} coordinates",
                report.fd.max_rel_err, report.fd_param.0, report.fd_param.1, report.coords_checked
            );
            println!(
                "adjoint vs discrete: relative error {:.3e} (largest in {})",
                report.adjoint_rel_err, report.adjoint_param
            );
            report.verdict()?;
            println!("ok");
        }
        Command::Ablate { config, sweep, out, parallel } => {
            let rows = cmd_ablate(&config, &sweep, &out, parallel)?;
            print!("{}", bfno_cli::summary_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tune_allocator();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
