fn main() {
    repsim::cli::init_logging();
    std::process::exit(repsim::cli::main_with_args(std::env::args_os()));
}
