fn main() {
    std::process::exit(streamsfm::cli::run(std::env::args_os()));
}
