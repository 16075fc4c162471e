fn main() {
    std::process::exit(flawfic_cli::run(std::env::args_os()));
}
