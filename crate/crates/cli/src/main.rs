use std::process::ExitCode;

fn main() -> ExitCode {
    sparsid_cli::run(std::env::args_os())
}
