fn main() {
    std::process::exit(twincount::cli::run(std::env::args_os()));
}
