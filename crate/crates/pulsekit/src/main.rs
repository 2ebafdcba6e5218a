use clap::Parser;

fn main() {
    let cli = pulsekit::cli::Cli::parse();
    if let Err(e) = pulsekit::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
