use std::process::ExitCode;

fn main() -> ExitCode {
    segdeepm::cli::main_with_args(std::env::args_os())
}
