fn main() {
    // Filled in once the core library lands.
}
