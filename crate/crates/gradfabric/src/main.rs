use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("GRADFABRIC_LOG")).init();
    ExitCode::from(gradfabric::cli::main_from_args(std::env::args()) as u8)
}
