fn main() {
    std::process::exit(transactive::cli::cli_main());
}
