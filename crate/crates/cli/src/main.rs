mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmkgc::kg::Modality;
use mmkgc::robustness::CorruptionKind;

use config::{LlmMode, Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "mmkgc", version, about = "Multimodal knowledge graph completion: retriever training, candidate retrieval and LLM reranking")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Thread cap (0 = all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Candidates per query
    #[arg(long, global = true)]
    k: Option<usize>,
    /// LLM mode for prediction
    #[arg(long, global = true, value_enum)]
    mode: Option<LlmMode>,
    /// LLM endpoint URL for http mode
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true, value_parser = parse_kind)]
    corruption: Option<CorruptionKind>,
    /// Corruption fraction in [0, 1]
    #[arg(long, global = true)]
    fraction: Option<f64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory (train.tsv, valid.tsv, test.tsv, <modality>.mmft)
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Checkpoint prefix (default <out>/herr)
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<CorruptionKind, String> {
    s.parse().map_err(|e: mmkgc::robustness::CorruptionError| e.to_string())
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    Modality::parse(s).ok_or_else(|| format!("unknown modality `{s}` (expected visual, textual or structural)"))
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain structural embeddings and write structural.mmft
    TrainStructure,
    /// Train the retriever and save a checkpoint
    TrainHerr,
    /// Dump top-k candidates for every test query
    Retrieve,
    /// Write LLM fine-tuning records built from the validation split
    ExportFinetune {
        /// Sample this many validation triples first
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Rerank retrieved candidates with an LLM (or a mock)
    Predict {
        /// JSON lines of {query_key, answer} for mock mode
        #[arg(long)]
        mock_answers: Option<PathBuf>,
        /// Fixed answer for every query in mock mode
        #[arg(long)]
        mock_constant: Option<String>,
    },
    /// Retriever metrics on a split
    Evaluate {
        #[arg(long, default_value = "test", value_parser = ["valid", "test"])]
        split: String,
        /// Also write report.csv
        #[arg(long)]
        csv: bool,
    },
    /// Corrupt the inputs, retrain and evaluate
    Simulate {
        #[arg(long, value_parser = parse_modality)]
        modality: Option<Modality>,
        #[arg(long)]
        noise_scale: Option<f64>,
    },
    /// Write fused entity embeddings under one relation
    ExportEmbeddings {
        #[arg(long)]
        relation: Option<String>,
    },
    /// Metrics and candidate recall across candidate-set sizes
    SweepK {
        /// Comma-separated sizes (default 10,20,30,40)
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long)]
        mock_answers: Option<PathBuf>,
        #[arg(long)]
        mock_constant: Option<String>,
    },
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        workers: c.workers,
        k: c.k,
        mode: c.mode,
        endpoint: c.endpoint.clone(),
        corruption: c.corruption,
        fraction: c.fraction,
        out: c.out.clone(),
        dataset: c.dataset.clone(),
        checkpoint: c.checkpoint.clone(),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    cfg.apply(&overrides(&cli.common));
    match &cli.command {
        Command::ExportFinetune { sample } => {
            if sample.is_some() {
                cfg.glp.finetune_sample = *sample;
            }
        }
        Command::Predict {
            mock_answers,
            mock_constant,
        }
        | Command::SweepK {
            mock_answers,
            mock_constant,
            ..
        } => {
            if mock_answers.is_some() {
                cfg.glp.mock_answers = mock_answers.clone();
            }
            if mock_constant.is_some() {
                cfg.glp.mock_constant = mock_constant.clone();
            }
        }
        Command::Simulate { modality, noise_scale } => {
            if modality.is_some() {
                cfg.corruption.modality = *modality;
            }
            if let Some(s) = noise_scale {
                cfg.corruption.noise_scale = *s;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    match cli.command {
        Command::TrainStructure => commands::train_structure(&mut cfg),
        Command::TrainHerr => commands::train_herr(&mut cfg),
        Command::Retrieve => commands::retrieve(&mut cfg),
        Command::ExportFinetune { .. } => commands::export_finetune(&mut cfg),
        Command::Predict { .. } => commands::predict(&mut cfg),
        Command::Evaluate { split, csv } => commands::evaluate(&mut cfg, &split, csv),
        Command::Simulate { .. } => commands::simulate(&mut cfg),
        Command::ExportEmbeddings { relation } => commands::export_embeddings(&mut cfg, relation.as_deref()),
        Command::SweepK { ks, .. } => {
            if let Some(ks) = ks {
                cfg.retrieval.sweep = ks;
            }
            cfg.validate()?;
            commands::sweep_k(&mut cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
