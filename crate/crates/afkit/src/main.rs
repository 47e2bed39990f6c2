fn main() {
    std::process::exit(afkit::cli::main_with_args(std::env::args_os()));
}
