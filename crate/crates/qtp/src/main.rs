fn main() {
    std::process::exit(qtp::cli::run(std::env::args().collect()));
}
