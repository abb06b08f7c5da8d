fn main() {
    std::process::exit(cmma_core::cli::run(std::env::args_os()));
}
