fn main() {
    std::process::exit(spinefm::cli::main_with_args(std::env::args_os()));
}
