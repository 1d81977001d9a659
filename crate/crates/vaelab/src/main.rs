use clap::Parser;

fn main() {
    let cli = vaelab::cli::Cli::parse();
    if let Err(e) = vaelab::cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
