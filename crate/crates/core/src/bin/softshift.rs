fn main() {
    std::process::exit(softshift::harness::cli_main(std::env::args_os()));
}
