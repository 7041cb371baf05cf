fn main() {
    env_logger::init();
    std::process::exit(loopgraph::cli::run_cli(std::env::args_os()));
}
