use clap::Parser;

fn main() {
    let cli = debias_cli::Cli::parse();
    if let Err(e) = debias_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
