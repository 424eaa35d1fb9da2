use clap::Parser;

fn main() {
    let cli = sdtp::Cli::parse();
    let code = sdtp::run(
        &cli,
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    );
    std::process::exit(code);
}
