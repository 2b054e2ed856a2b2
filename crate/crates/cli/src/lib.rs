//! Command dispatch and the HTTP service for the triage engine.

pub mod server;

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use triage_core::config::{EmbeddingConfig, EngineConfig};
use triage_core::engine::{self, Recommender};

#[derive(Debug, Parser)]
#[command(name = "triage", version, about = "Hybrid bug triage: content model plus interaction history")]
pub struct Cli {
    /// JSON config file. Missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Artifact directory, overriding the config.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse the raw export, resolve owners and split train/test.
    Ingest(IngestArgs),
    /// Fine-tune the content ensemble.
    Train(TrainArgs),
    /// Embed the training reports into the similarity index.
    Index(IndexArgs),
    /// Grid-search the hybrid parameters on a validation sample.
    Tune(TuneArgs),
    /// Score every model on the test split.
    Evaluate,
    /// Rank developers for one new report.
    Recommend(RecommendArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub raw: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Use a remote embedding service instead of the configured provider.
    #[arg(long)]
    pub embedding_url: Option<String>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    /// Sweep τ, λ and W_f only.
    #[arg(long)]
    pub coordinate_subset: bool,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    #[arg(long, default_value = "")]
    pub title: String,
    #[arg(long, default_value = "")]
    pub description: String,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub addr: Option<String>,
}

/// Config file plus the global overrides.
pub fn base_config(cli: &Cli) -> anyhow::Result<EngineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => EngineConfig::load(p).map_err(anyhow::Error::msg).context("loading config")?,
        None => EngineConfig::default(),
    };
    if let Some(w) = &cli.workdir {
        cfg.data.workdir = w.clone();
    }
    Ok(cfg)
}

/// Applies the per-command overrides.
pub fn apply_overrides(cfg: &mut EngineConfig, command: &Command) {
    match command {
        Command::Ingest(a) => {
            if let Some(r) = &a.raw {
                cfg.data.raw = Some(r.clone());
            }
            if let Some(t) = a.threshold {
                cfg.data.active_threshold = t;
            }
            if let Some(f) = a.train_fraction {
                cfg.data.train_fraction = f;
            }
        }
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                cfg.cbr.epochs = e;
            }
            if let Some(lr) = a.peak_lr {
                cfg.cbr.peak_lr = lr;
            }
        }
        Command::Index(a) => {
            if let Some(url) = &a.embedding_url {
                cfg.embedding = EmbeddingConfig::Remote { url: url.clone() };
            }
        }
        Command::Tune(a) => {
            cfg.tuning.coordinate_subset |= a.coordinate_subset;
            if let Some(k) = a.top_k {
                cfg.tuning.grid.top_k = k;
            }
        }
        Command::Serve(a) => {
            if let Some(addr) = &a.addr {
                cfg.serve.addr = addr.clone();
            }
        }
        Command::Evaluate | Command::Recommend(_) => {}
    }
}

/// Runs one batch command and returns its JSON summary. `serve` is
/// handled by the binary since it never returns.
pub fn run_batch(cfg: &EngineConfig, command: &Command) -> anyhow::Result<Value> {
    let out = match command {
        Command::Ingest(_) => {
            let m = engine::stage_ingest(cfg)?;
            tracing::info!(train = m.train_count, test = m.test_count, active = m.active_developers.len(), "ingested");
            serde_json::to_value(m)?
        }
        Command::Train(_) => {
            let log = engine::stage_train(cfg)?;
            let last = log.step_losses.last().copied();
            tracing::info!(steps = log.steps, final_loss = last, "trained");
            json!({ "steps": log.steps, "epochs": log.epochs, "final_loss": last })
        }
        Command::Index(_) => {
            let index = engine::stage_index(cfg)?;
            tracing::info!(entries = index.len(), "indexed");
            json!({ "entries": index.len(), "provider": index.provider_id })
        }
        Command::Tune(_) => {
            let r = engine::stage_tune(cfg)?;
            tracing::info!(points = r.hits.len(), best = r.best_score(), "tuned");
            json!({
                "points": r.hits.len(),
                "queries": r.n_queries,
                "top_k": r.top_k,
                "best_score": r.best_score(),
                "best_params": r.best(),
            })
        }
        Command::Evaluate => {
            let r = engine::stage_evaluate(cfg)?;
            tracing::info!(models = r.models.len(), samples = r.sample_ids.len(), "evaluated");
            json!({
                "samples": r.sample_ids.len(),
                "topk": r.models.iter().map(|m| (m.name.clone(), serde_json::to_value(&m.topk).unwrap())).collect::<serde_json::Map<_, _>>(),
                "orthogonality": r.orthogonality,
                "significance": r.significance,
            })
        }
        Command::Recommend(a) => {
            let rec = Recommender::load(cfg)?;
            serde_json::to_value(rec.recommend(&a.title, &a.description, a.k)?)?
        }
        Command::Serve(_) => anyhow::bail!("serve is not a batch command"),
    };
    Ok(out)
}
