fn main() {
    std::process::exit(copvae_cli::run(std::env::args_os()));
}
