fn main() {
    std::process::exit(planar3d_cli::main_with_args(std::env::args_os()));
}
