use std::process::ExitCode;

use clap::Parser;
use revffn::commands::{run, Cli};

fn main() -> ExitCode {
    run(Cli::parse())
}
