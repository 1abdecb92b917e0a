fn main() {
    std::process::exit(mfbsdej::cli::main_with_args(std::env::args_os()));
}
