fn main() {
    std::process::exit(bgad_cli::run(std::env::args_os()));
}
