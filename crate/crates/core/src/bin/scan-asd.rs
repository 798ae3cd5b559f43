fn main() {
    std::process::exit(scan_asd::harness::cli::run(std::env::args_os()));
}
