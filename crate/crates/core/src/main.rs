fn main() {
    std::process::exit(relvae::cli::run(std::env::args_os()));
}
