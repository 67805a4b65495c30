mod args;
mod commands;
mod config;
mod output;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use crate::args::Cli;

/// `forest heatmap` reads its config file as an experiment grid rather than
/// as flag values.
fn is_heatmap(argv: &[OsString]) -> bool {
    argv.windows(2).any(|w| w[0] == "forest" && w[1] == "heatmap")
}

fn run(argv: Vec<OsString>) -> u8 {
    let config = match config::find_config(&argv).map(PathBuf::from) {
        Some(p) => match config::read_value(&p) {
            Ok(v) => Some(v),
            Err(e) => {
                eprintln!("error: {e:#}");
                return 2;
            }
        },
        None => None,
    };
    let heatmap = is_heatmap(&argv);
    let argv = match (&config, heatmap) {
        (Some(v), false) => match config::merge(argv, v) {
            Ok(a) => a,
            Err(e) => {
                eprintln!("error: {e:#}");
                return 2;
            }
        },
        _ => argv,
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return 1;
        }
    }
    match commands::dispatch(&cli, if heatmap { config.as_ref() } else { None }) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os().collect()))
}
