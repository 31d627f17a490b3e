fn main() {
    std::process::exit(cord::bench::cli_run(std::env::args()));
}
