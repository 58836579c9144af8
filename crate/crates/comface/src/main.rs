use clap::Parser;

fn main() {
    let cli = comface::cli::Cli::parse();
    std::process::exit(comface::cli::main_with(cli));
}
