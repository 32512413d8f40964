fn main() {
    std::process::exit(parakernel::harness::run_cli(std::env::args_os()));
}
