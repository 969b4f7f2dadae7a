fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let verbose = args.iter().any(|a| a == "-v" || a == "--verbose");
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if verbose {
        "info"
    } else {
        "warn"
    }))
    .target(env_logger::Target::Stderr)
    .init();
    let stdout = std::io::stdout();
    let code = rocknet_cli::run(args, &mut stdout.lock());
    std::process::exit(code);
}
