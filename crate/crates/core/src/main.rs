fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDERICO_LOG", "warn")).init();
    std::process::exit(federico::harness::cli::run_cli(std::env::args_os()));
}
