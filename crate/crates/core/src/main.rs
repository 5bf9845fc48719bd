fn main() {
    std::process::exit(flexidit::cli_io::main_exit());
}
