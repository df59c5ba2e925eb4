fn main() {
    std::process::exit(bioatt_cli::run(std::env::args_os()));
}
