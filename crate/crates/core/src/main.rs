fn main() {
    std::process::exit(meta_wrapper::cli::run(std::env::args_os()));
}
