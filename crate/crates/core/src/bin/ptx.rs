fn main() {
    std::process::exit(ptx_core::cli::run(std::env::args_os()));
}
