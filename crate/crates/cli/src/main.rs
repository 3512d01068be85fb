fn main() {
    std::process::exit(bdvae_cli::main_with_args(std::env::args_os()));
}
