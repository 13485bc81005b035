fn main() {
    std::process::exit(blockscl::cli::main_with_args(std::env::args_os()));
}
