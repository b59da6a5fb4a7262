fn main() {
    std::process::exit(arcopo::cli::run(std::env::args_os()));
}
