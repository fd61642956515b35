fn main() {
    std::process::exit(ralm_cli::run(std::env::args_os()));
}
