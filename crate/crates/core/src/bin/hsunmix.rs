use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use hsunmix::cli::{run, Cli};

fn main() -> ExitCode {
    let threads = match std::env::var("HSUNMIX_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error: HSUNMIX_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(1);
            }
        },
        Err(_) => 1,
    };
    hsunmix::tensor::set_thread_cap(threads);

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
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
