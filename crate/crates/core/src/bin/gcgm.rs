fn main() {
    std::process::exit(gcgm::cli::run(std::env::args_os()));
}
