fn main() {
    std::process::exit(tleg_cli::cli_dispatch(std::env::args_os()));
}
