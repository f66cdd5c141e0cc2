fn main() {
    std::process::exit(samic::cli::run(std::env::args_os()));
}
