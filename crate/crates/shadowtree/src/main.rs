fn main() {
    std::process::exit(shadowtree::cli::main_with_args(std::env::args_os()));
}
