use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(postsel::cli::run_cli(std::env::args_os()) as u8)
}
