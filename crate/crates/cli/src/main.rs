use clap::Parser;

fn main() {
    let cli = padkit_cli::Cli::parse();
    if let Err(e) = padkit_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
