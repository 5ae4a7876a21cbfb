use clap::Parser;
use imcgae::cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    run(Cli::parse())
}
