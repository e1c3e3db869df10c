use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(attnwalk::cli::run(std::env::args_os()) as u8)
}
