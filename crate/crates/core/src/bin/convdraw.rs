fn main() {
    std::process::exit(convdraw::cli::run(std::env::args_os()));
}
