fn main() {
    std::process::exit(texhuman::cli::run(std::env::args_os()));
}
