fn main() {
    std::process::exit(oiqa_cli::run(std::env::args_os()));
}
