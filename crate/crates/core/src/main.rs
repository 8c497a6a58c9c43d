use std::process::exit;

fn main() {
    exit(sivi_spatial::cli::run());
}
