fn main() {
    std::process::exit(jagan::cli::main_with_args(std::env::args().collect()));
}
