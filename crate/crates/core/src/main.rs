fn main() {
    std::process::exit(bionic::cli::run(std::env::args_os()));
}
