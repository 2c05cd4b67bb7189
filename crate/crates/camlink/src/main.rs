fn main() {
    std::process::exit(camlink::harness::run());
}
