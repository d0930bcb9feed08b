use clap::Parser;
use lorentzian_cli::alloc::CountingAlloc;
use lorentzian_cli::cli::{run, Cli};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() {
    let cli = Cli::parse();
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}
