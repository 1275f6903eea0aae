fn main() {
    std::process::exit(nonergodic::cli::main_with_args(std::env::args_os()));
}
