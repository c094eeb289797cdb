fn main() {
    std::process::exit(splitguard::harness::cli::run_cli(std::env::args_os()));
}
