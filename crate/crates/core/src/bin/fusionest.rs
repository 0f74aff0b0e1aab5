fn main() {
    std::process::exit(fusionest::cli::run(std::env::args_os()));
}
