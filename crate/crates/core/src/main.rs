fn main() {
    std::process::exit(rblb::cli::cli_main(std::env::args_os()));
}
