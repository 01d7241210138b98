fn main() {
    std::process::exit(eotlab_cli::run(std::env::args_os()));
}
