fn main() {
    std::process::exit(morphatlas::cli::run(std::env::args_os()));
}
