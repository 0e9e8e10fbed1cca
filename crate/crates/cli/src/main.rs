fn main() {
    std::process::exit(sar_cli::run(std::env::args_os()));
}
