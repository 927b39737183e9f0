fn main() {
    // Placeholder while the CLI module is under construction.
}
