fn main() {
    std::process::exit(uvlp::cli::run());
}
