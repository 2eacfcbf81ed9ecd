fn main() {
    std::process::exit(downpour::cli::run(std::env::args_os()));
}
