fn main() {
    std::process::exit(tul::cli::run(std::env::args_os()));
}
