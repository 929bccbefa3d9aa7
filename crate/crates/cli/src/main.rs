fn main() {
    std::process::exit(hipline_cli::main_with(std::env::args_os()));
}
