use std::process::ExitCode;

fn main() -> ExitCode {
    pvscan::cli::main_with_args(std::env::args_os())
}
