fn main() {
    lulc_cli::init_logging();
    std::process::exit(lulc_cli::run_from_args(std::env::args_os()));
}
