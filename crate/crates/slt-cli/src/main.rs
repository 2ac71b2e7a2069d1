fn main() {
    eprintln!("slt: not yet wired up");
    std::process::exit(1);
}
