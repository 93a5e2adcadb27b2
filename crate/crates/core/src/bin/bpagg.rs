fn main() {
    std::process::exit(bpagg::cli::run(std::env::args_os()));
}
