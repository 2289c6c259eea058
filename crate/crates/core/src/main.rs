use std::process::ExitCode;

use wvae::cli::{self, Outcome};

fn main() -> ExitCode {
    match cli::run(std::env::args_os()) {
        Ok(Outcome::Done(text) | Outcome::Info(text)) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(u8::try_from(f.exit_code).unwrap_or(1))
        }
    }
}
