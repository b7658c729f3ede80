fn main() {
    std::process::exit(concept_kernel::cli::main_with(std::env::args_os()));
}
