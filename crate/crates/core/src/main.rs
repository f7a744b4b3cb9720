use clap::Parser;

fn main() {
    let cli = gmcf::cli::Cli::parse();
    std::process::exit(gmcf::cli::run_cli(&cli));
}
