fn main() {
    std::process::exit(bluelight::cli::run(std::env::args_os()));
}
