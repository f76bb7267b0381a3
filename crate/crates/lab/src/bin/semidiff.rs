use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = semidiff_lab::cli::Cli::parse();
    std::process::exit(semidiff_lab::cli::main_with(cli));
}
