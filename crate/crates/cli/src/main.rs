use clap::Parser;

fn main() {
    std::process::exit(parkour_cli::run(parkour_cli::Cli::parse()));
}
