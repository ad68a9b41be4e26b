fn main() {
    std::process::exit(irs_rpb::expcli::main_with(std::env::args_os()));
}
