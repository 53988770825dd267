fn main() {
    std::process::exit(avatar::cli::main_with_args(std::env::args_os()));
}
