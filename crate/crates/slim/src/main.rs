fn main() {
    std::process::exit(slim::cli::run_from(std::env::args_os()));
}
