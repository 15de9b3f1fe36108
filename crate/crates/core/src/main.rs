fn main() {
    std::process::exit(drcf::cli::run(std::env::args_os()));
}
