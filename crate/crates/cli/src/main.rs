fn main() {
    std::process::exit(diffora_cli::run(std::env::args_os()));
}
