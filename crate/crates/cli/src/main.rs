use std::process::exit;

fn main() {
    exit(tempora_cli::cli_main(std::env::args_os()));
}
