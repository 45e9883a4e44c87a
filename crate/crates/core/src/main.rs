fn main() {
    std::process::exit(otmatch::cli::run(std::env::args_os()));
}
