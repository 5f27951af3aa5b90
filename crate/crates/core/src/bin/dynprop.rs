fn main() {
    std::process::exit(dynprop::cli::run_from(std::env::args_os()));
}
