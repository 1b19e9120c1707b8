fn main() {
    std::process::exit(igu_lora_cli::run(std::env::args_os()));
}
