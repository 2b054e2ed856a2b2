//! Pipeline stages and the recommendation service core.
//!
//! Each stage reads its inputs from and writes its outputs to the configured
//! working directory:
//!
//! | stage    | reads                              | writes                                  |
//! |----------|------------------------------------|-----------------------------------------|
//! | ingest   | raw export                         | `train.jsonl`, `test.jsonl`, `manifest.json` |
//! | train    | `train.jsonl`                      | `model.json`, `train_log.json`          |
//! | index    | `train.jsonl`                      | `index.bin`                             |
//! | tune     | train, model, index                | `tune.csv`, `best_params.json`          |
//! | evaluate | test, train, model, index          | `eval.json`, `hits.csv`                 |

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::{self, CandidateScore};
use crate::cbr::{self, CbrError, CbrModel, LabelMode, TrainLog};
use crate::config::{Aggregation, EmbeddingConfig, EngineConfig};
use crate::corpus::{self, BugReport, CorpusError, IngestManifest};
use crate::eval::{self, EvalError, EvalReport};
use crate::hybrid::{HybridParams, PreparedQuery};
use crate::ibr::IbrError;
use crate::simindex::{self, EmbeddingProvider, IndexError, ReferenceProvider, SimilarityIndex};
use crate::tuner::{self, TuneError, TuneReport};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.json";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const INDEX_FILE: &str = "index.bin";
pub const TUNE_TABLE_FILE: &str = "tune.csv";
pub const BEST_PARAMS_FILE: &str = "best_params.json";
pub const EVAL_FILE: &str = "eval.json";
pub const HITS_FILE: &str = "hits.csv";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Cbr(#[from] CbrError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Tune(#[from] TuneError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Params(#[from] IbrError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("service unavailable: {0}")]
    Unavailable(String),
    #[error("bad request: {0}")]
    BadInput(String),
    #[error("{path}: {reason}")]
    File { path: String, reason: String },
}

impl EngineError {
    /// HTTP-style status for the error.
    pub fn status(&self) -> u16 {
        match self {
            EngineError::Unavailable(_) => 503,
            EngineError::BadInput(_) => 400,
            _ => 500,
        }
    }
}

fn file_err(path: &Path, e: impl std::fmt::Display) -> EngineError {
    EngineError::File {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EngineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| file_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| file_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, EngineError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| file_err(path, e))
}

pub fn make_provider(cfg: &EmbeddingConfig) -> Result<Box<dyn EmbeddingProvider>, EngineError> {
    match cfg {
        EmbeddingConfig::Reference { dim, seed } => Ok(Box::new(ReferenceProvider::new(*dim, *seed))),
        #[cfg(feature = "remote")]
        EmbeddingConfig::Remote { url } => Ok(Box::new(simindex::RemoteProvider::connect(url)?)),
        #[cfg(not(feature = "remote"))]
        EmbeddingConfig::Remote { .. } => Err(EngineError::Config("built without remote embedding support".into())),
    }
}

fn check_provider(index: &SimilarityIndex, provider: &dyn EmbeddingProvider) -> Result<(), EngineError> {
    if index.provider_id != provider.id() || index.dim != provider.dim() {
        return Err(IndexError::ProviderMismatch {
            existing: index.provider_id.clone(),
            existing_dim: index.dim,
            provider: provider.id().to_string(),
            dim: provider.dim(),
        }
        .into());
    }
    Ok(())
}

/// The index must hold exactly the history issues, in order.
fn check_history(index: &SimilarityIndex, history: &[BugReport]) -> Result<(), EngineError> {
    let aligned = index.entries.len() == history.len() && index.entries.iter().zip(history).all(|(e, r)| e.id == r.id);
    if aligned {
        Ok(())
    } else {
        Err(EngineError::Config("index does not match the training split; rebuild it".into()))
    }
}

/// Interaction scoring applies to developer recommendation only.
pub fn uses_interactions(mode: LabelMode) -> bool {
    mode == LabelMode::Developer
}

/// Scores `queries` with the content model and retrieves their similar
/// history issues at threshold `tau_min`. Queries without a label under
/// `mode` get `truth = None`.
pub fn prepare_queries(
    model: &CbrModel,
    index: &SimilarityIndex,
    provider: &dyn EmbeddingProvider,
    history: &[BugReport],
    queries: &[BugReport],
    tau_min: f64,
) -> Result<Vec<PreparedQuery>, EngineError> {
    check_provider(index, provider)?;
    check_history(index, history)?;
    let mode = model.config.label_mode;
    let interactions = uses_interactions(mode);
    let vectors = if interactions {
        let texts: Vec<String> = queries.iter().map(BugReport::normalized_text).collect();
        provider.embed(&texts)?
    } else {
        vec![Vec::new(); queries.len()]
    };
    let pairs: Vec<(&BugReport, Vec<f64>)> = queries.iter().zip(vectors).collect();
    let prepared = crate::par_map(&pairs, |(q, v)| -> Result<PreparedQuery, EngineError> {
        let pred = model.predict(q)?;
        let nps: BTreeMap<String, f64> = pred.labels.into_iter().zip(pred.nps).collect();
        let hits = if interactions {
            index.retrieve(v, tau_min).map_err(|e| match e {
                IndexError::DegenerateVector(None) => IndexError::DegenerateVector(Some(q.id.clone())),
                e => e,
            })?
        } else {
            Vec::new()
        };
        Ok(PreparedQuery::new(&q.id, mode.label(q).map(str::to_string), q.created_at, nps, &hits, history))
    });
    prepared.into_iter().collect()
}

fn by_score_then_id(scores: &BTreeMap<String, f64>) -> Vec<String> {
    let mut v: Vec<(&String, f64)> = scores.iter().map(|(k, s)| (k, *s)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    v.into_iter().map(|(k, _)| k.clone()).collect()
}

/// Rankings of every compared model for one query, keyed by model name.
pub fn rankings(q: &PreparedQuery, history: &[BugReport], params: &HybridParams, interactions: bool) -> Vec<(&'static str, Vec<String>)> {
    let content = by_score_then_id(&q.nps);
    if !interactions {
        return vec![("cbr", content)];
    }
    let nis = q.nis(history, params);
    let ibr = by_score_then_id(&nis);
    let hybrid: Vec<String> = aggregator::wra(&q.nps, &nis, params.wf)
        .expect("aligned")
        .into_iter()
        .map(|c| c.developer)
        .collect();
    let borda = aggregator::borda(&content, &ibr).expect("aligned").into_iter().map(|(d, _)| d).collect();
    vec![("cbr", content), ("ibr", ibr), ("hybrid", hybrid), ("borda", borda)]
}

/// Evaluation report over labelled queries; unlabelled ones are skipped.
/// Significance compares the hybrid ranker (or the content ranker when
/// interactions are off) against every other model.
pub fn evaluate_queries(
    queries: &[PreparedQuery],
    history: &[BugReport],
    params: &HybridParams,
    interactions: bool,
) -> Result<EvalReport, EngineError> {
    let labelled: Vec<&PreparedQuery> = queries.iter().filter(|q| q.truth.is_some()).collect();
    let per_query = crate::par_map(&labelled, |q| rankings(q, history, params, interactions));
    let names: Vec<&str> = per_query.first().map(|r| r.iter().map(|(n, _)| *n).collect()).unwrap_or_default();
    let models: Vec<(String, Vec<Vec<String>>)> = names
        .iter()
        .enumerate()
        .map(|(m, name)| (name.to_string(), per_query.iter().map(|r| r[m].1.clone()).collect()))
        .collect();
    let ids: Vec<String> = labelled.iter().map(|q| q.id.clone()).collect();
    let truth: Vec<String> = labelled.iter().map(|q| q.truth.clone().unwrap()).collect();
    let reference = if interactions { "hybrid" } else { "cbr" };
    Ok(eval::evaluate(&ids, &truth, &models, reference)?)
}

/// Sorted positions of a seeded sample of `floor(fraction · n)` issues.
pub fn validation_sample(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let m = (fraction * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, m.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Parameters for scoring: tuned ones when present, else the configured ones.
pub fn effective_params(cfg: &EngineConfig) -> Result<HybridParams, EngineError> {
    let path = cfg.artifact(BEST_PARAMS_FILE);
    if path.exists() {
        let mut p: HybridParams = read_json(&path)?;
        p.allow_negative_lambda = cfg.hybrid.allow_negative_lambda;
        p.validate()?;
        Ok(p)
    } else {
        Ok(cfg.hybrid)
    }
}

fn ensure_workdir(cfg: &EngineConfig) -> Result<(), EngineError> {
    fs::create_dir_all(&cfg.data.workdir).map_err(|e| file_err(&cfg.data.workdir, e))
}

pub fn stage_ingest(cfg: &EngineConfig) -> Result<IngestManifest, EngineError> {
    let raw_path = cfg.data.raw.as_ref().ok_or_else(|| EngineError::Config("data.raw is not set".into()))?;
    if !raw_path.exists() {
        return Err(EngineError::Config(format!("{} does not exist", raw_path.display())));
    }
    ensure_workdir(cfg)?;
    let raw = corpus::read_raw_jsonl(raw_path)?;
    let (split, manifest) = corpus::ingest(raw, cfg.data.active_threshold, cfg.data.train_fraction)?;
    corpus::write_reports_jsonl(&cfg.artifact(TRAIN_FILE), &split.train)?;
    corpus::write_reports_jsonl(&cfg.artifact(TEST_FILE), &split.test)?;
    write_json(&cfg.artifact(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn train_model(train: &[BugReport], cfg: &cbr::CbrConfig) -> Result<(CbrModel, TrainLog), EngineError> {
    let mode = cfg.label_mode;
    let weights = corpus::sampling_weights_by(train, |r| mode.label(r));
    Ok(cbr::train(train, &weights, cfg)?)
}

pub fn stage_train(cfg: &EngineConfig) -> Result<TrainLog, EngineError> {
    ensure_workdir(cfg)?;
    let train = corpus::read_reports_jsonl(&cfg.artifact(TRAIN_FILE))?;
    let (model, log) = train_model(&train, &cfg.cbr)?;
    model.save(&cfg.artifact(MODEL_FILE))?;
    write_json(&cfg.artifact(TRAIN_LOG_FILE), &log)?;
    Ok(log)
}

pub fn stage_index(cfg: &EngineConfig) -> Result<SimilarityIndex, EngineError> {
    ensure_workdir(cfg)?;
    let train = corpus::read_reports_jsonl(&cfg.artifact(TRAIN_FILE))?;
    let provider = make_provider(&cfg.embedding)?;
    Ok(simindex::build_index_at(&cfg.artifact(INDEX_FILE), &train, provider.as_ref())?)
}

fn load_model(cfg: &EngineConfig) -> Result<CbrModel, EngineError> {
    let path = cfg.artifact(MODEL_FILE);
    if !path.exists() {
        return Err(EngineError::Unavailable(format!("no trained model at {}", path.display())));
    }
    Ok(CbrModel::load(&path)?)
}

fn load_index(cfg: &EngineConfig) -> Result<SimilarityIndex, EngineError> {
    let path = cfg.artifact(INDEX_FILE);
    if !path.exists() {
        return Err(EngineError::Unavailable(format!("no similarity index at {}", path.display())));
    }
    Ok(SimilarityIndex::load(&path)?)
}

pub fn tune_table_csv(report: &TuneReport) -> String {
    let mut out = String::from("tau,lambda,ip_assignment,ip_commit_or_pr,ip_discussion,wf,accuracy\n");
    for (p, s) in report.table() {
        let [a, b, c, d, e, f] = p.tuple();
        out.push_str(&format!("{a},{b},{c},{d},{e},{f},{s}\n"));
    }
    out
}

/// Grid-searches on a seeded validation sample of the training split.
pub fn stage_tune(cfg: &EngineConfig) -> Result<TuneReport, EngineError> {
    if !uses_interactions(cfg.cbr.label_mode) {
        return Err(EngineError::Config("tuning applies to developer recommendation only".into()));
    }
    let train = corpus::read_reports_jsonl(&cfg.artifact(TRAIN_FILE))?;
    let model = load_model(cfg)?;
    let index = load_index(cfg)?;
    let provider = make_provider(&cfg.embedding)?;
    let picks = validation_sample(train.len(), cfg.data.validation_fraction, cfg.cbr.seed);
    let validation: Vec<BugReport> = picks.iter().map(|&i| train[i].clone()).collect();
    let grid = if cfg.tuning.coordinate_subset {
        cfg.tuning.grid.coordinate_subset(&cfg.hybrid.points)
    } else {
        cfg.tuning.grid.clone()
    };
    let values = grid.values()?;
    let tau_min = values.axes[0].iter().cloned().fold(f64::INFINITY, f64::min);
    let queries = prepare_queries(&model, &index, provider.as_ref(), &train, &validation, tau_min)?;
    let report = tuner::grid_search(&grid, &queries, &train)?;
    let path = cfg.artifact(TUNE_TABLE_FILE);
    fs::write(&path, tune_table_csv(&report)).map_err(|e| file_err(&path, e))?;
    write_json(&cfg.artifact(BEST_PARAMS_FILE), &report.best())?;
    Ok(report)
}

pub fn stage_evaluate(cfg: &EngineConfig) -> Result<EvalReport, EngineError> {
    let train = corpus::read_reports_jsonl(&cfg.artifact(TRAIN_FILE))?;
    let test = corpus::read_reports_jsonl(&cfg.artifact(TEST_FILE))?;
    let model = load_model(cfg)?;
    let index = load_index(cfg)?;
    let provider = make_provider(&cfg.embedding)?;
    let params = effective_params(cfg)?;
    let queries = prepare_queries(&model, &index, provider.as_ref(), &train, &test, params.tau)?;
    let report = evaluate_queries(&queries, &train, &params, uses_interactions(model.config.label_mode))?;
    write_json(&cfg.artifact(EVAL_FILE), &report)?;
    let path = cfg.artifact(HITS_FILE);
    fs::write(&path, report.hits_csv()).map_err(|e| file_err(&path, e))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub fs: f64,
    pub nps: f64,
    pub nis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub candidates: Vec<Candidate>,
    pub mode: LabelMode,
}

/// Everything needed to answer recommendation requests. Immutable once
/// built; a service swaps whole instances to pick up retrained artifacts.
pub struct Recommender {
    model: CbrModel,
    index: SimilarityIndex,
    history: Vec<BugReport>,
    provider: Box<dyn EmbeddingProvider>,
    params: HybridParams,
    aggregation: Aggregation,
}

impl Recommender {
    pub fn new(
        model: CbrModel,
        index: SimilarityIndex,
        history: Vec<BugReport>,
        provider: Box<dyn EmbeddingProvider>,
        params: HybridParams,
        aggregation: Aggregation,
    ) -> Result<Self, EngineError> {
        check_provider(&index, provider.as_ref())?;
        check_history(&index, &history)?;
        params.validate()?;
        Ok(Self {
            model,
            index,
            history,
            provider,
            params,
            aggregation,
        })
    }

    /// Loads the trained artifacts from the working directory.
    pub fn load(cfg: &EngineConfig) -> Result<Self, EngineError> {
        let model = load_model(cfg)?;
        let index = load_index(cfg)?;
        let history = corpus::read_reports_jsonl(&cfg.artifact(TRAIN_FILE))?;
        let provider = make_provider(&cfg.embedding)?;
        Self::new(model, index, history, provider, effective_params(cfg)?, cfg.aggregation)
    }

    pub fn labels(&self) -> &[String] {
        &self.model.label_space
    }

    pub fn params(&self) -> &HybridParams {
        &self.params
    }

    pub fn recommend(&self, title: &str, description: &str, k: usize) -> Result<Recommendation, EngineError> {
        self.recommend_at(title, description, k, Utc::now())
    }

    /// Top-`k` candidates (all of them if `k` exceeds the label count)
    /// with interaction ages measured up to `now`.
    pub fn recommend_at(&self, title: &str, description: &str, k: usize, now: DateTime<Utc>) -> Result<Recommendation, EngineError> {
        if k == 0 {
            return Err(EngineError::BadInput("k must be at least 1".into()));
        }
        let text = corpus::normalize_text(&format!("{title} {description}"));
        if text.is_empty() {
            return Err(EngineError::BadInput("title and description are empty after normalization".into()));
        }
        let pred = self.model.predict_text(&text)?;
        let nps: BTreeMap<String, f64> = pred.labels.into_iter().zip(pred.nps).collect();
        let mode = self.model.config.label_mode;
        let hits = if uses_interactions(mode) && self.aggregation != Aggregation::ContentOnly {
            let v = self.index.embed_query(self.provider.as_ref(), &text)?;
            self.index.retrieve(&v, self.params.tau)?
        } else {
            Vec::new()
        };
        let q = PreparedQuery::new("", None, now, nps, &hits, &self.history);
        let nis = q.nis(&self.history, &self.params);
        let mut scored: Vec<CandidateScore> = match self.aggregation {
            Aggregation::Wra => q.rank(&self.history, &self.params),
            Aggregation::ContentOnly => aggregator::wra(&q.nps, &nis, 0.0).expect("aligned"),
            Aggregation::Borda => {
                let content = by_score_then_id(&q.nps);
                let inter = by_score_then_id(&nis);
                aggregator::borda(&content, &inter)
                    .expect("aligned")
                    .into_iter()
                    .map(|(d, points)| CandidateScore {
                        fs: points as f64,
                        nps: q.nps[&d],
                        nis: nis[&d],
                        developer: d,
                    })
                    .collect()
            }
        };
        scored.truncate(k);
        Ok(Recommendation {
            candidates: scored
                .into_iter()
                .map(|c| Candidate {
                    id: c.developer,
                    fs: c.fs,
                    nps: c.nps,
                    nis: c.nis,
                })
                .collect(),
            mode,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainDecision {
    pub retrain: bool,
    /// Previously unseen developers that reached the threshold.
    pub developers: Vec<String>,
}

/// Retraining is due once a developer the model does not know has resolved
/// at least `threshold` issues.
pub fn retrain_trigger(new_resolved: &BTreeMap<String, usize>, known: &BTreeSet<String>, threshold: usize) -> RetrainDecision {
    let developers: Vec<String> = new_resolved
        .iter()
        .filter(|(d, n)| !known.contains(*d) && **n >= threshold)
        .map(|(d, _)| d.clone())
        .collect();
    RetrainDecision {
        retrain: !developers.is_empty(),
        developers,
    }
}
