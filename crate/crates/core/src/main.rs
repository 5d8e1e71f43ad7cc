fn main() {
    std::process::exit(ghnn::cli::run(std::env::args_os()));
}
