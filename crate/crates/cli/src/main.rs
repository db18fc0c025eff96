mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use manifest::ManifestBuilder;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        // Usage errors exit 2; --help and --version exit 0.
        Err(e) => e.exit(),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let flags = serde_json::to_value(&cli.command).expect("arguments serialize");
    let manifest = ManifestBuilder::new(cli.command.name(), argv[1..].to_vec(), flags);
    let result = match &cli.command {
        Command::Train(a) => commands::train(a, manifest),
        Command::Probe(a) => commands::probe(a, manifest),
        Command::LatentMap(a) => commands::latent_map(a, manifest),
        Command::Sweep(a) => commands::sweep(a, manifest),
        Command::MiniMnist(a) => commands::mini_mnist_cmd(a, manifest),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
