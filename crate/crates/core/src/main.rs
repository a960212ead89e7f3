fn main() {
    std::process::exit(latentdid::cli::main_with_args(std::env::args_os()));
}
