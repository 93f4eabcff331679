fn main() {
    std::process::exit(ctvit::cli::run(std::env::args_os()));
}
