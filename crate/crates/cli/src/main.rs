use clap::Parser;

fn main() {
    let cli = elf_cli::Cli::parse();
    if let Err(e) = elf_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code().into());
    }
}
