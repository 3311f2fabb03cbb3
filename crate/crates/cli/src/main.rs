use clap::Parser;

fn main() {
    let cli = pdro_cli::Cli::parse();
    if let Err(e) = pdro_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
