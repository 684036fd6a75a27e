fn main() {
    std::process::exit(miracle::cli::run(std::env::args_os()));
}
