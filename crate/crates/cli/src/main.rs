fn main() {
    std::process::exit(mrfmap_cli::main_with_args(std::env::args_os()));
}
