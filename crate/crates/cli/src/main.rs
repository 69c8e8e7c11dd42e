use clap::Parser;
use ternary_cli::cli::Cli;
use ternary_cli::exit_code;

fn main() {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("TERNARY_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size thread pool: {e}");
        }
    }
    match cli.run() {
        Ok(report) => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
