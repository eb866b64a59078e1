fn main() {
    std::process::exit(cgp::cli::run(std::env::args_os()));
}
