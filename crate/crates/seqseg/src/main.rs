fn main() {
    std::process::exit(seqseg::cli::run());
}
