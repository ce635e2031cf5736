use std::process::ExitCode;

fn main() -> ExitCode {
    ngpsr_cli::main_with_args(std::env::args_os())
}
