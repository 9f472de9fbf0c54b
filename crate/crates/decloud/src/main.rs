//! Binary entry point; all behavior lives in [`decloud::cli`].

fn main() {
    std::process::exit(decloud::cli::main_with_args(std::env::args_os()));
}
