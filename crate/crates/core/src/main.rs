fn main() {
    std::process::exit(safe_rl_attack::cli::run(std::env::args_os()));
}
