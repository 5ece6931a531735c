fn main() {
    std::process::exit(bnp::cli::main_with_args(std::env::args_os()));
}
