fn main() {
    std::process::exit(sinonet::cli::run(std::env::args_os()));
}
