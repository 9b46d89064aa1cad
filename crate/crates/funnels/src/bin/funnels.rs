fn main() {
    std::process::exit(funnels::cli::run(std::env::args()));
}
