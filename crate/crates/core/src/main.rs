use std::process::ExitCode;

fn main() -> ExitCode {
    offtweet::cli::run()
}
