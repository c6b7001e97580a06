use clap::Parser;

fn main() {
    let cli = ul2r::cli::Cli::parse();
    if let Err(err) = ul2r::cli::run(cli) {
        eprintln!("{}", ul2r::cli::error_line(&err));
        std::process::exit(1);
    }
}
