fn main() {
    std::process::exit(icopt::cli::main_with_args(std::env::args_os()));
}
