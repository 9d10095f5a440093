use std::process::ExitCode;

fn main() -> ExitCode {
    pmtts::cli::run(std::env::args_os())
}
