fn main() {
    laugh_mole::cli::main()
}
