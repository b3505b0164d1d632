fn main() {
    std::process::exit(botdgt::cli::run(std::env::args_os()));
}
