fn main() {
    std::process::exit(linmerge::cli::run(std::env::args_os()));
}
