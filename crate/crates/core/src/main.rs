fn main() {
    std::process::exit(cpoforge::cli::run(std::env::args_os()));
}
