use clap::Parser;
use surfquad::cli::{run, Cli, ErrorReport};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn,surfquad::basis::rules=error")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        let report = ErrorReport::new(&e);
        eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
        std::process::exit(1);
    }
}
