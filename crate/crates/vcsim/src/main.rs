use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(vcsim::cli::main_from(std::env::args_os()))
}
