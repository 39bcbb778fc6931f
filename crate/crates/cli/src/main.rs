use clap::Parser;

use cyclediff::cli::{run, Cli};
use cyclediff::init_threads;

fn main() {
    let cli = Cli::parse();
    init_threads(cli.threads);
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
