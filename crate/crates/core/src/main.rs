use std::process::ExitCode;

fn main() -> ExitCode {
    vce::cli::main_entry()
}
