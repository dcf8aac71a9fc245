fn main() {
    std::process::exit(lisense::cli::main_with(std::env::args().skip(1).collect()));
}
