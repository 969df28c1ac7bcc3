fn main() {
    std::process::exit(seascan::cli::run(std::env::args_os()));
}
