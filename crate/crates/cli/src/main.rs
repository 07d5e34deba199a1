fn main() {
    std::process::exit(tips_cli::run_command(std::env::args_os()));
}
