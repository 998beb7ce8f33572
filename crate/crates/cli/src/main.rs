fn main() {
    std::process::exit(d2q_cli::main_with(std::env::args_os()));
}
