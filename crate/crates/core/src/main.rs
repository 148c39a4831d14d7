fn main() {
    std::process::exit(calib_core::harness::cli::run(std::env::args_os()));
}
