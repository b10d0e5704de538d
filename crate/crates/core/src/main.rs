use clap::Parser;

fn main() {
    let cli = qmargin::cli::Cli::parse();
    if let Err(e) = qmargin::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(qmargin::cli::exit_code(&e));
    }
}
