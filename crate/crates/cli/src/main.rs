mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};

use args::{Cli, Command};

fn usage_error(msg: String) -> ! {
    Cli::command().error(ErrorKind::ValueValidation, msg).exit()
}

fn main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    let dims = match &cli.command {
        Command::Profile(a) => &a.dims,
        Command::Sweep(a) => &a.dims,
        Command::Attend(a) => &a.dims,
    };
    if let Err(msg) = dims.validate() {
        usage_error(msg);
    }

    match &cli.command {
        Command::Profile(a) => commands::profile(a)?,
        Command::Sweep(a) => {
            if dcag_core::harness::sweep::square_side(a.dims.img_tokens).is_err() {
                usage_error(format!("--img-tokens {} must be a perfect square for sweep", a.dims.img_tokens));
            }
            commands::sweep_cmd(a)?
        }
        Command::Attend(a) => {
            if !commands::attend(a)? {
                eprintln!("invariant checks failed");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
