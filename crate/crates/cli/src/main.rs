fn main() {
    std::process::exit(imgloss_cli::run(std::env::args_os()));
}
