fn main() {
    std::process::exit(rearec_cli::run(std::env::args_os()));
}
