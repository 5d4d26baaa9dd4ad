fn main() {
    std::process::exit(prism::cli::main_with_args(std::env::args_os()));
}
