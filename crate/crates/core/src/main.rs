fn main() {
    std::process::exit(wickmart::cli::run(std::env::args().collect()));
}
