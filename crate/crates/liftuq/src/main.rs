fn main() {
    std::process::exit(liftuq::cli_main());
}
