fn main() {
    std::process::exit(muscdb::cli::run(std::env::args_os()));
}
