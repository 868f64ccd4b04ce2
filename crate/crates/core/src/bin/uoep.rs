fn main() {
    std::process::exit(uoep_core::cli::run(std::env::args_os()));
}
