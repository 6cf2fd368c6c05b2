fn main() {
    env_logger::init();
    std::process::exit(dccrn_kws::cli::run(std::env::args_os()));
}
