fn main() {
    std::process::exit(xbar_attn::cli::main_with_args(std::env::args_os()));
}
