fn main() {
    iccr_core::tune_allocator();
    std::process::exit(iccr_cli::run(std::env::args_os()));
}
