fn main() {
    std::process::exit(dpcn_cli::run(std::env::args_os()));
}
