fn main() {
    std::process::exit(organloc::cli::run(std::env::args_os()));
}
