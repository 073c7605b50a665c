fn main() {
    std::process::exit(convert_speak::harness::cli::run(std::env::args_os()));
}
