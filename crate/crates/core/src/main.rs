fn main() {
    let code = ardiffusion::cli::run(std::env::args_os());
    std::process::exit(code);
}
