fn main() {
    std::process::exit(cirpose::cli::run_cli(std::env::args_os()));
}
