fn main() {
    let code = cdfsod::run(std::env::args_os());
    std::process::exit(code);
}
