fn main() {
    std::process::exit(viralfront::cli::main_with_args(std::env::args_os()));
}
