fn main() {
    std::process::exit(twfe_cli::run(std::env::args_os()));
}
