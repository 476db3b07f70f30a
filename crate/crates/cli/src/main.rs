//! `hgae`: train, probe and analyze heterogeneous graph masked autoencoders.
//!
//! Exit codes: 0 success, 1 invalid input, 2 failure while running.
//! Stdout carries only the paths of the artifacts written.

mod commands;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

#[derive(Parser)]
#[command(name = "hgae", version, about = "Heterogeneous graph masked autoencoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Score frozen checkpoint embeddings with a linear probe.
    Probe(ProbeArgs),
    /// Count connected components of masked meta-path graphs.
    MaskAnalyze(MaskAnalyzeArgs),
    /// Write a synthetic heterogeneous dataset.
    GenSynthetic(GenArgs),
    /// Export target-node embeddings of a checkpoint.
    Embed(EmbedArgs),
    /// Train and probe model variants over several seeds.
    Ablate(AblateArgs),
    /// Repeat the run recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON hyperparameter file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// random, degree or attention.
    #[arg(long)]
    pub mask_strategy: Option<String>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ProbeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding `params.bin` and `config.json`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated training percentages out of 20, 40, 60.
    #[arg(long)]
    pub splits: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct MaskAnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated strategies.
    #[arg(long, default_value = "random,degree,attention")]
    pub strategy: String,
    /// `start:stop:step` or a comma list.
    #[arg(long, default_value = "0:0.9:0.1")]
    pub rates: String,
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    /// Comma-separated meta-path names; all when omitted.
    #[arg(long)]
    pub metapath: Option<String>,
    /// Checkpoint whose encoder supplies attention scores.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Model config for attention scores when no checkpoint is given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub inverse_softmax_c: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenArgs {
    /// JSON generator spec; built-in benchmark when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EmbedArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated variants: full, feat_only, mp_only, no_enhancement,
    /// mask_none, mask_random, mask_degree, mask_attention.
    #[arg(long, default_value = "full,feat_only,mp_only,no_enhancement")]
    pub variants: String,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug, Clone)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the repeated run.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a, None),
        Command::Probe(a) => commands::probe(&a),
        Command::MaskAnalyze(a) => commands::mask_analyze(&a),
        Command::GenSynthetic(a) => commands::gen_synthetic(&a, None),
        Command::Embed(a) => commands::embed(&a),
        Command::Ablate(a) => commands::ablate(&a, None),
        Command::Rerun(a) => commands::rerun(&a),
    };
    match result {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
