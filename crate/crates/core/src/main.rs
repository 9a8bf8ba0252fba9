fn main() {
    std::process::exit(chunkcomp::cli::main_with(std::env::args_os()));
}
