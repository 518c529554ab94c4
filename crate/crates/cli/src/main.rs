fn main() {
    std::process::exit(decorre_cli::run(std::env::args_os()));
}
