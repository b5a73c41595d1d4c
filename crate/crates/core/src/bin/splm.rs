fn main() {
    std::process::exit(splm::cli::run_cli(std::env::args_os()));
}
