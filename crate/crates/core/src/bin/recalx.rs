fn main() {
    std::process::exit(recalx::cli::run(std::env::args_os()));
}
