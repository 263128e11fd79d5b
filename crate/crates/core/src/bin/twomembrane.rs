fn main() {
    std::process::exit(twomembrane::cli::run(std::env::args_os()));
}
