fn main() {
    std::process::exit(spkxl::cli::run(std::env::args_os()));
}
