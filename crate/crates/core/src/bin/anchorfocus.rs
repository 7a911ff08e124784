use std::process::ExitCode;

fn main() -> ExitCode {
    anchorfocus::cli::run_from(std::env::args_os())
}
