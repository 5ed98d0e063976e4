fn main() {
    std::process::exit(attnlink::cli::dispatch(std::env::args_os()));
}
