fn main() {
    env_logger::init();
    std::process::exit(hoi2threat::cli::run());
}
