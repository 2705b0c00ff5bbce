fn main() {
    std::process::exit(drdfl::cli::run(std::env::args_os()));
}
