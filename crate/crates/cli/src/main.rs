fn main() {
    std::process::exit(histoatlas::main_with_args(std::env::args().collect()));
}
