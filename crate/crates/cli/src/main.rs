fn main() {
    std::process::exit(ngram_cli::run(std::env::args_os()));
}
