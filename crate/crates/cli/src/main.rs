fn main() {
    let code = ifgkit::run(std::env::args_os());
    std::process::exit(code);
}
