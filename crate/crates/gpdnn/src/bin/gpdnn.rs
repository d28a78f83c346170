fn main() {
    std::process::exit(gpdnn::cli::run(std::env::args_os()));
}
