fn main() {
    std::process::exit(curator::cli::run_cli());
}
