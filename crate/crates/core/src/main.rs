fn main() {
    std::process::exit(vidcap::cli::run(std::env::args_os()));
}
