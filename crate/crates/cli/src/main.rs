use clap::Parser;

fn main() {
    std::process::exit(dualflow_cli::run(dualflow_cli::Cli::parse()));
}
