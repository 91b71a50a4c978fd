fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(safe_nmpc::cli::run(&args));
}
