fn main() {
    std::process::exit(ripelab_cli::cli::run_cli(std::env::args_os()));
}
