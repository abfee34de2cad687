fn main() {
    std::process::exit(cgct_cli::run(std::env::args_os()));
}
