fn main() {
    std::process::exit(siafnet_cli::run_args(std::env::args_os()));
}
