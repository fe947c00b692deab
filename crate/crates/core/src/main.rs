fn main() {
    std::process::exit(causal_damage::cli::run(std::env::args_os()));
}
