fn main() {
    std::process::exit(diffshield_cli::run_cli(std::env::args_os()));
}
