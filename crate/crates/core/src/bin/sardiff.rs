fn main() {
    std::process::exit(sardiff::cli::main_with_args(std::env::args_os()));
}
