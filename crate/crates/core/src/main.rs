fn main() {
    std::process::exit(cpm::cli::run(std::env::args_os()));
}
