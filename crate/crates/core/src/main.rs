fn main() {
    std::process::exit(dreg_lab::cli::main_with_args(std::env::args_os()));
}
