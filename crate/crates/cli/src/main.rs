use std::process::ExitCode;

fn main() -> ExitCode {
    fusedmpc_cli::main_with(std::env::args().collect())
}
