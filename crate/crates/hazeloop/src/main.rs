use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hazeloop::commands;
use hazeloop::config::Config;
use hazeloop::error::{Error, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "hazeloop", version, about = "Instruction- and feedback-guided closed-loop dehazing")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural dataset with manifest under data.out_dir.
    Synth,
    /// Train the stage given by train.stage.
    Train,
    /// Dehaze one image, guided by an instruction.
    Infer {
        image: PathBuf,
        #[arg(long)]
        instruction: String,
        /// Output image path (.png or .ppm).
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Write the per-image CSV report.
    Eval,
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Synth => commands::cmd_synth(&cfg, &mut out).map(drop),
        Command::Train => commands::cmd_train(&cfg, &mut out).map(drop),
        Command::Infer {
            image,
            instruction,
            output,
        } => commands::cmd_infer(&cfg, &image, &instruction, &output, &mut out, &mut std::io::stderr()).map(drop),
        Command::Eval => commands::cmd_eval(&cfg, &mut out).map(drop),
    }?;
    out.flush().map_err(|e| Error::io("<stdout>", e))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG as u8) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
