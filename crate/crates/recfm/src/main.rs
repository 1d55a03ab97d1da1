fn main() {
    std::process::exit(recfm::cli::run(std::env::args_os()));
}
