use clap::Parser;
use mtlseqlab::cli;

fn main() {
    std::process::exit(cli::run(cli::Cli::parse()));
}
