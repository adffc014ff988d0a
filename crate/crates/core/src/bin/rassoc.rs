fn main() {
    std::process::exit(rationale_assoc::cli::main_with_args(std::env::args_os()));
}
