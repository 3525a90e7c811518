fn main() {
    std::process::exit(grouprl::cli::run(std::env::args_os()));
}
