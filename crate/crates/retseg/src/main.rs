fn main() {
    std::process::exit(retseg::cli::main_entry());
}
