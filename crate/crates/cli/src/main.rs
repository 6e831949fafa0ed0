use clap::Parser;

use trunc_mc_cli::config::Cli;

fn main() {
    let cli = Cli::parse();
    match trunc_mc_cli::run(&cli) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("trunc-mc: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
