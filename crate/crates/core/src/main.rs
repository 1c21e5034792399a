fn main() {
    std::process::exit(occvote::cli::main_with_args(std::env::args_os()));
}
