fn main() {
    std::process::exit(marginkd::cli::run(std::env::args_os()));
}
