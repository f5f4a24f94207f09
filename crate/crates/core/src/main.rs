fn main() {
    std::process::exit(ddpet_core::cli::run(std::env::args_os().collect()));
}
