fn main() {
    std::process::exit(vecformer::cli::run(std::env::args_os()));
}
