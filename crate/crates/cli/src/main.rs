fn main() {
    std::process::exit(typtab_cli::run(std::env::args_os()));
}
