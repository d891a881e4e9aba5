fn main() {
    std::process::exit(mdtl::cli::main_with_args(std::env::args_os()));
}
