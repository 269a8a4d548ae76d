use clap::Parser;

fn main() {
    std::process::exit(isag::cli::run(isag::cli::Cli::parse()));
}
