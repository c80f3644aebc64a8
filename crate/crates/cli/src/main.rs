use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thinconv_cli::{cmd_bench, cmd_eval, cmd_sparsify, cmd_train, exit_code, ExperimentConfig};

#[derive(Parser)]
#[command(name = "thinconv", version, about = "Group-sparse convolution training and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh LeNet (plain, fixed pattern, or regularized).
    Train(Common),
    /// Sparsify a checkpoint (mode = finetune or gradual).
    Sparsify(Common),
    /// Time the lowered convolution across density levels.
    Bench(Common),
    /// Report accuracy and per-layer density of a checkpoint.
    Eval(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let common = match &cli.command {
        Command::Train(c) | Command::Sparsify(c) | Command::Bench(c) | Command::Eval(c) => c,
    };
    let run = || -> thinconv::Result<()> {
        let cfg = ExperimentConfig::load(common.config.as_deref(), &common.set)?;
        match &cli.command {
            Command::Train(_) => {
                let r = cmd_train(&cfg)?;
                println!("test accuracy {:.4}; wrote {}", r.accuracy_after, cfg.output_dir.display());
            }
            Command::Sparsify(_) => {
                let r = cmd_sparsify(&cfg)?;
                for p in &r.phases {
                    println!("{}: test accuracy {:.4}", p.phase, p.test_accuracy);
                }
                for l in &r.layers {
                    println!("layer {}: density {:.4}", l.layer, l.density);
                }
                println!("wrote {}", cfg.output_dir.display());
            }
            Command::Bench(_) => {
                let r = cmd_bench(&cfg)?;
                print!("{}", r.to_csv()?);
            }
            Command::Eval(_) => print!("{}", cmd_eval(&cfg)?),
        }
        Ok(())
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
