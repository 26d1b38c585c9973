fn main() {
    std::process::exit(inpaint_compose_cli::run(std::env::args_os()));
}
