fn main() {
    std::process::exit(vbitn_cli::run(std::env::args_os()));
}
