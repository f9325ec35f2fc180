use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    streamgauge::cli::main_with(streamgauge::cli::Cli::parse())
}
