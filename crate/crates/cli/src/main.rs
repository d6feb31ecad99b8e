use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(milrank_cli::run(std::env::args_os()))
}
