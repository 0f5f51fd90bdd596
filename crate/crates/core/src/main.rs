fn main() {
    std::process::exit(mtunet::cli::run());
}
