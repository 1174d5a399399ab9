fn main() {
    std::process::exit(dadkit::cli::main_with_args(std::env::args_os()));
}
