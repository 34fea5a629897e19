fn main() {
    std::process::exit(sparse_rl::cli::run(std::env::args_os()));
}
