fn main() {
    std::process::exit(e2llm::cli::run(std::env::args_os()));
}
