fn main() {
    std::process::exit(elf_cli::run(std::env::args_os()));
}
