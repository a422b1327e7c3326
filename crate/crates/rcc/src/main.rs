use clap::Parser;

fn main() {
    let cli = rcc::cli::Cli::parse();
    match rcc::cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}
