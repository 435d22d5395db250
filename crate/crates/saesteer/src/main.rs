fn main() {
    std::process::exit(saesteer::cli::run(std::env::args()));
}
