use std::process::ExitCode;

fn main() -> ExitCode {
    rtport::cli::main()
}
