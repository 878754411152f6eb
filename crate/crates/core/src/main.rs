fn main() {
    std::process::exit(gridattn::cli::main_with_args(std::env::args_os()));
}
