fn main() {
    std::process::exit(sensireg_cli::run(std::env::args_os()));
}
