fn main() {
    std::process::exit(hctmg::cli::main_with_args(std::env::args_os()));
}
