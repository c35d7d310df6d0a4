fn main() {
    std::process::exit(transaction::cli::main_with_args(std::env::args_os()));
}
