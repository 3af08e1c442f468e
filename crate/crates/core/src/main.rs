fn main() {
    std::process::exit(asl2pet::cli::run(std::env::args_os()));
}
