fn main() {
    std::process::exit(pafa_cli::run(std::env::args_os()));
}
