use clap::Parser;
use cmr_cli::args::Cli;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = cmr_cli::run(&cli) {
        eprintln!("cmr: {e}");
        std::process::exit(e.exit_code());
    }
}
