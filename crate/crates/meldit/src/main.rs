fn main() -> std::process::ExitCode {
    env_logger::init();
    meldit::cli::run()
}
