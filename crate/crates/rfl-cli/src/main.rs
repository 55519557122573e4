fn main() {
    eprintln!("rfl: command surface under construction");
    std::process::exit(2);
}
