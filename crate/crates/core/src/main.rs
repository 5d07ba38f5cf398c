fn main() {
    std::process::exit(aloha_stability::cli::run(std::env::args_os()));
}
