use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(fedchain::cli::run(std::env::args_os()))
}
