fn main() {
    std::process::exit(dail_cli::run_command(std::env::args_os()));
}
