fn main() {
    std::process::exit(glc_core::cli::run(std::env::args_os()));
}
