fn main() {
    std::process::exit(distill_ssl::cli::run(std::env::args_os()));
}
