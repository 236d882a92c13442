fn main() {
    std::process::exit(meaflow_cli::run(std::env::args_os()));
}
