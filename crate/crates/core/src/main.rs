fn main() {
    std::process::exit(advclr::cli::run(std::env::args_os()));
}
