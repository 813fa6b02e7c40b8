fn main() {
    std::process::exit(hardy_lab::cli::main_with(std::env::args_os()));
}
