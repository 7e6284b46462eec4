use clap::Parser;

fn main() {
    let cli = enmpc::cli::Cli::parse();
    if let Err(e) = enmpc::cli::execute(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(e.exit_code());
    }
}
