fn main() {
    std::process::exit(ganleak::cli::cli_dispatch(std::env::args_os()));
}
