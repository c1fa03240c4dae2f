fn main() {
    std::process::exit(mxfpq::cli::main());
}
