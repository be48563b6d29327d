fn main() {
    std::process::exit(robust_entropy::io::cli_main(std::env::args_os()));
}
