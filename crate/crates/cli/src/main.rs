fn main() {
    std::process::exit(mixprec_cli::run(std::env::args_os()));
}
