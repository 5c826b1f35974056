use clap::Parser;

fn main() {
    let args = cbdom::cli::Args::parse();
    std::process::exit(cbdom::cli::main_with(args));
}
