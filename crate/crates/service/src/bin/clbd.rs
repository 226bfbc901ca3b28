fn main() {
    std::process::exit(clbd_service::cli::main());
}
