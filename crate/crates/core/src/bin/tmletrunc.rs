fn main() {
    std::process::exit(tmletrunc::cli::run(std::env::args_os()));
}
