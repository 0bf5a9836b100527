fn main() {
    std::process::exit(segbone::cli::run(std::env::args_os()));
}
