fn main() {
    std::process::exit(smoe_core::cli::run_from(std::env::args_os()));
}
