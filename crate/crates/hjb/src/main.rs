fn main() {
    std::process::exit(hjb::cli::main_with_args(std::env::args_os()));
}
