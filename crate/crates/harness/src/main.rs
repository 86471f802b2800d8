fn main() {
    std::process::exit(corruptlab_harness::cli::run());
}
