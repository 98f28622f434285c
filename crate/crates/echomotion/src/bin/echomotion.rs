fn main() {
    std::process::exit(echomotion::run_cli());
}
