fn main() {
    std::process::exit(rescue_ipw::cli::run(std::env::args_os()));
}
