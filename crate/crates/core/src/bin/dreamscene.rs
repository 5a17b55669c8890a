fn main() {
    std::process::exit(dreamscene::cli::run(std::env::args_os()));
}
