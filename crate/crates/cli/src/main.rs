fn main() {
    std::process::exit(ctask_cli::cli::main_with(std::env::args_os()));
}
