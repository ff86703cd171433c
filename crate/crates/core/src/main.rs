use clap::Parser;

use respir::cli::Cli;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = respir::cli::run(&cli) {
        // machine-readable error on stderr, stable exit codes per kind
        let payload = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
        eprintln!("{payload}");
        std::process::exit(e.exit_code());
    }
}
