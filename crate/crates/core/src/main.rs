fn main() {
    std::process::exit(jumpcouple::cli::main_entry());
}
