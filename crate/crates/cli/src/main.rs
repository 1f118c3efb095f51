use std::process::ExitCode;

fn main() -> ExitCode {
    dabdetr_cli::main_entry()
}
