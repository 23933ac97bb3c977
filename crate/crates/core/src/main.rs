use clap::Parser;

fn main() {
    let cli = psunet::cli::Cli::parse();
    std::process::exit(psunet::cli::run(cli));
}
