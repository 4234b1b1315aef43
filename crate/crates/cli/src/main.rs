fn main() {
    std::process::exit(mvspde_cli::run(std::env::args_os()));
}
