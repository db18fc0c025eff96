use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

// Fields spelled `std::option::Option` hold parsed sentinels ("none", "full",
// "all") and are not optional flags.

#[derive(Debug, Parser, Serialize)]
#[command(name = "vaeprobe", version, about = "Train small VAEs on MNIST and compare their decoders with the optimal weighted-average decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Train a VAE and write its checkpoint and loss history
    Train(TrainArgs),
    /// Compare reconstructions with weighted averages on test images
    Probe(ProbeArgs),
    /// Max-weight map over a 2-D latent space
    LatentMap(LatentMapArgs),
    /// Train and probe a family of architectures on a holdout split
    Sweep(SweepArgs),
    /// Sample a small balanced training set
    MiniMnist(MiniMnistArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Probe(_) => "probe",
            Command::LatentMap(_) => "latent-map",
            Command::Sweep(_) => "sweep",
            Command::MiniMnist(_) => "mini-mnist",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainData {
    /// IDX image file of the training set
    #[arg(long)]
    pub train_images: PathBuf,
    /// IDX label file of the training set
    #[arg(long)]
    pub train_labels: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TestData {
    #[arg(long)]
    pub test_images: PathBuf,
    #[arg(long)]
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Shallow,
    Deep,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum ArchArg {
    Named(Arch),
    Widths(Vec<usize>),
}

impl ArchArg {
    pub fn hidden(&self) -> Vec<usize> {
        match self {
            ArchArg::Named(Arch::Shallow) => vec![400],
            ArchArg::Named(Arch::Deep) => vec![400, 200, 100],
            ArchArg::Widths(w) => w.clone(),
        }
    }
}

pub fn parse_arch(s: &str) -> Result<ArchArg, String> {
    match s {
        "shallow" => Ok(ArchArg::Named(Arch::Shallow)),
        "deep" => Ok(ArchArg::Named(Arch::Deep)),
        _ => {
            let widths = s
                .split(',')
                .map(|w| match w.trim().parse::<usize>() {
                    Ok(0) | Err(_) => Err(format!("expected shallow, deep or positive widths like 400,200; got {s:?}")),
                    Ok(v) => Ok(v),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ArchArg::Widths(widths))
        }
    }
}

pub fn parse_holdout(s: &str) -> Result<Option<u8>, String> {
    if s == "none" {
        return Ok(None);
    }
    parse_digit(s).map(Some)
}

pub fn parse_digit(s: &str) -> Result<u8, String> {
    match s.parse::<u8>() {
        Ok(d) if d <= 9 => Ok(d),
        _ => Err(format!("expected a digit 0-9, got {s:?}")),
    }
}

pub fn parse_subset(s: &str) -> Result<Option<usize>, String> {
    if s == "full" {
        return Ok(None);
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(Some(n)),
        _ => Err(format!("expected a positive count or \"full\", got {s:?}")),
    }
}

pub fn parse_test_digit(s: &str) -> Result<Option<u8>, String> {
    if s == "all" {
        return Ok(None);
    }
    parse_digit(s).map(Some)
}

pub fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let bad = || format!("expected ROWSxCOLS like 200x200, got {s:?}");
    let (r, c) = s.split_once('x').ok_or_else(bad)?;
    match (r.parse::<usize>(), c.parse::<usize>()) {
        (Ok(r), Ok(c)) if r > 0 && c > 0 => Ok((r, c)),
        _ => Err(bad()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ZModeArg {
    Mean,
    Sample,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: TrainData,
    /// Digit removed from the training set, or "none"
    #[arg(long, default_value = "none", value_parser = parse_holdout)]
    pub holdout: std::option::Option<u8>,
    /// shallow (400), deep (400,200,100) or comma-separated encoder widths
    #[arg(long, default_value = "shallow", value_parser = parse_arch)]
    pub arch: ArchArg,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub latent_dim: u64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train on this many shuffled training images, or "full"
    #[arg(long, default_value = "full", value_parser = parse_subset)]
    pub subset: std::option::Option<usize>,
    /// Shuffle seed for --subset
    #[arg(long, default_value_t = 0)]
    pub subset_seed: u64,
    /// Split each minibatch across threads (not bit-identical to sequential)
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub train: TrainData,
    #[command(flatten)]
    pub test: TestData,
    /// Probe only this test digit, or "all"
    #[arg(long, default_value = "all", value_parser = parse_test_digit)]
    pub test_digit: std::option::Option<u8>,
    #[arg(long, value_enum, default_value_t = ZModeArg::Mean)]
    pub z_mode: ZModeArg,
    /// Seeds sampled z and the gallery selection
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Examples shown in the gallery
    #[arg(long, default_value_t = 8)]
    pub gallery: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct LatentMapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub train: TrainData,
    /// Grid resolution as ROWSxCOLS
    #[arg(long, default_value = "200x200", value_parser = parse_grid)]
    pub grid: (usize, usize),
    #[arg(long, default_value_t = 0.25)]
    pub margin: f64,
    #[arg(long, default_value_t = 4)]
    pub per_stratum: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub train: TrainData,
    #[command(flatten)]
    pub test: TestData,
    #[arg(long, default_value = "paper17", value_parser = ["paper17", "single"])]
    pub preset: String,
    #[arg(long, default_value = "9", value_parser = parse_digit, conflicts_with = "all_digits")]
    pub holdout: u8,
    /// Run the sweep once for every held-out digit 0-8
    #[arg(long)]
    pub all_digits: bool,
    #[arg(long, default_value = "full", value_parser = parse_subset)]
    pub subset: std::option::Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub subset_seed: u64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Held-out test images shown and scored per architecture
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    pub probe_count: u64,
    /// Architectures trained concurrently
    #[arg(long, env = "VAEPROBE_THREADS", default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MiniMnistArgs {
    #[command(flatten)]
    pub data: TrainData,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub per_digit: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}
