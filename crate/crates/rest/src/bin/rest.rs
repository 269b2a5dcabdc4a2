//! Thin binary wrapper; all logic lives in the library.

fn main() {
    std::process::exit(rest::cli::run(std::env::args_os()));
}
