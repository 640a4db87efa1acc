fn main() {
    std::process::exit(slca::cli::main_with_args(std::env::args_os()));
}
