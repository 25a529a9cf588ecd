fn main() {
    std::process::exit(evprop::cli::main());
}
