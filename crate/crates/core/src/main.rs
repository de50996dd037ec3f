use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = cbdt::cli::Cli::parse();
    if let Err(e) = cbdt::cli::run(&cli) {
        let message = format!("{e:#}");
        eprintln!("{}", serde_json::json!({ "error": message }));
        std::process::exit(1);
    }
}
