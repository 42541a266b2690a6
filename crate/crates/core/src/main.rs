fn main() {
    std::process::exit(compvo::cli::run_from_args(std::env::args_os()));
}
