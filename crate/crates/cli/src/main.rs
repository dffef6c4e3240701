fn main() {
    std::process::exit(aawr_cli::main_entry());
}
