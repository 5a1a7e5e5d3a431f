fn main() {
    std::process::exit(repairlab::cli::run(std::env::args_os()));
}
