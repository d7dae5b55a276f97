use clap::Parser;

fn main() {
    let cli = pgrisk_cli::Cli::parse();
    std::process::exit(pgrisk_cli::run(cli));
}
