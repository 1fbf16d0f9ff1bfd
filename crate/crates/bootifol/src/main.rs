fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(bootifol::cli::run_from(std::env::args_os()))
}
