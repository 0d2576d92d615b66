#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod cli;
mod commands;
mod files;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use cli::{Cli, Command};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AGGLO_LOG", "warn"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };

    let result = match cli.command {
        Command::Phis(c) => commands::phis::run(c),
        Command::Tome(c) => commands::tome::run(c),
        Command::Mosaic(c) => commands::mosaic::run(c),
        Command::ScaleEq(a) => commands::scale_eq::run(a),
        Command::Train(c) => commands::train::run(c),
        Command::Viz(a) => commands::viz::run(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
