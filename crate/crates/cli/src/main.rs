use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(tcvae_cli::app::run(std::env::args_os()) as u8)
}
