fn main() {
    std::process::exit(detnas::cli::run(std::env::args_os()));
}
