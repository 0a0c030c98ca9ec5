fn main() {
    std::process::exit(pamil::cli::run_from(std::env::args_os()));
}
