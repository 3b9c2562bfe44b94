fn main() {
    std::process::exit(pathfinder::cli::run(std::env::args_os()));
}
