fn main() -> std::process::ExitCode {
    covsteer_cli::run(std::env::args_os())
}
