fn main() {
    std::process::exit(dpan::cli::run(std::env::args_os()));
}
