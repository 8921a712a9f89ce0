fn main() {
    std::process::exit(sepgp::cli::run(std::env::args_os()));
}
