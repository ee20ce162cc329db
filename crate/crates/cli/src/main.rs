use clap::Parser;

fn main() {
    let cli = provenir_cli::args::Cli::parse();
    let mut stdout = std::io::stdout();
    std::process::exit(provenir_cli::run(cli, &mut stdout));
}
