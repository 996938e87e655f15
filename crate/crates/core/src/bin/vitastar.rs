fn main() {
    std::process::exit(vitastar::cli::run(std::env::args_os()));
}
