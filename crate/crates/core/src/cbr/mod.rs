//! Content-based ranker.
//!
//! Text is encoded by every encoder in the ensemble; for each of the top `K`
//! layers the per-encoder matrices are scaled by learnable hidden-state
//! weights and concatenated along the feature axis. Each fused matrix feeds
//! its own convolutional head, and the heads' logits are combined by a
//! learnable weighted sum (soft voting) before the softmax.

pub mod head;
pub mod optim;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{BugReport, SampleWeights};
use crate::encoder::{Encoder, EncoderCache, EncoderError, EncoderKind, EncoderSpec, LayeredEmbedding, Prepared};
use crate::tensor::{axpy, dot, min_max, softmax, Matrix};
pub use head::{ClassifierHead, Mode, DEFAULT_FILTERS, FILTER_WIDTHS};
use head::HeadOutput;
use optim::{AdamW, LinearSchedule};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CbrError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation in head {head}")]
    NonFinite { head: usize },
    #[error("label {0:?} is not in the model's label space")]
    UnknownLabel(String),
    #[error("training split has no labelled reports")]
    EmptyTrain,
    #[error("training diverged at epoch {epoch}, batch {batch} (loss {loss})")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

/// What the classifier predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    Developer,
    /// First listed component of each report.
    Component,
}

impl LabelMode {
    pub fn label<'a>(&self, report: &'a BugReport) -> Option<&'a str> {
        match self {
            LabelMode::Developer => report.owner.as_deref(),
            LabelMode::Component => report.components.first().map(String::as_str),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CbrConfig {
    pub encoders: Vec<EncoderSpec>,
    /// Number of top encoder layers fused, which is also the number of heads.
    pub k_layers: usize,
    pub filters: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub bn_momentum: f64,
    pub seed: u64,
    pub label_mode: LabelMode,
}

impl Default for CbrConfig {
    fn default() -> Self {
        let mut toy = EncoderSpec::new("toy", EncoderKind::Toy);
        toy.num_layers = 6;
        Self {
            encoders: vec![EncoderSpec::new("ngram", EncoderKind::HashedNgram), toy],
            k_layers: 3,
            filters: DEFAULT_FILTERS,
            dropout: 0.3,
            batch_size: 16,
            epochs: 40,
            peak_lr: 1e-5,
            weight_decay: 0.001,
            warmup_fraction: 0.1,
            bn_momentum: 0.1,
            seed: 0,
            label_mode: LabelMode::Developer,
        }
    }
}

impl CbrConfig {
    pub fn validate(&self) -> Result<(), CbrError> {
        if self.encoders.is_empty() {
            return Err(CbrError::Config("at least one encoder is required".into()));
        }
        let seq = self.encoders[0].max_tokens;
        for e in &self.encoders {
            e.validate()?;
            e.check_k(self.k_layers)?;
            if e.max_tokens != seq {
                return Err(CbrError::Config(format!(
                    "encoder {} has max_tokens {} but {} expected",
                    e.id, e.max_tokens, seq
                )));
            }
        }
        let ids: BTreeSet<&str> = self.encoders.iter().map(|e| e.id.as_str()).collect();
        if ids.len() != self.encoders.len() {
            return Err(CbrError::Config("encoder ids must be unique".into()));
        }
        if self.filters == 0 || self.batch_size == 0 {
            return Err(CbrError::Config("filters and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CbrError::Config("dropout must lie in [0, 1)".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(CbrError::Config("peak_lr must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Scales layer `j` of encoder `i` by `hw[i][j]` and concatenates the
/// encoders along the feature axis, giving one fused matrix per layer.
pub fn fuse_layers(embeddings: &[LayeredEmbedding], hw: &[Vec<f64>]) -> Result<Vec<Matrix>, CbrError> {
    let first = embeddings
        .first()
        .ok_or_else(|| CbrError::Shape("no embeddings to fuse".into()))?;
    let k = first.layers.len();
    let seq = first.seq_len();
    if hw.len() != embeddings.len() {
        return Err(CbrError::Shape(format!(
            "{} hidden-weight rows for {} encoders",
            hw.len(),
            embeddings.len()
        )));
    }
    for (e, w) in embeddings.iter().zip(hw) {
        if e.layers.len() != k || w.len() != k {
            return Err(CbrError::Shape(format!(
                "encoder {} has {} layers / {} weights, expected {k}",
                e.encoder_id,
                e.layers.len(),
                w.len()
            )));
        }
        if e.layers.iter().any(|l| l.rows != seq || l.cols != e.dim) {
            return Err(CbrError::Shape(format!(
                "encoder {} layer shape differs from {seq}×{}",
                e.encoder_id, e.dim
            )));
        }
    }
    let total: usize = embeddings.iter().map(|e| e.dim).sum();
    Ok((0..k)
        .map(|j| {
            let mut fused = Matrix::zeros(seq, total);
            for r in 0..seq {
                let row = fused.row_mut(r);
                let mut off = 0;
                for (e, w) in embeddings.iter().zip(hw) {
                    let src = e.layers[j].row(r);
                    for (o, s) in row[off..off + e.dim].iter_mut().zip(src) {
                        *o = w[j] * s;
                    }
                    off += e.dim;
                }
            }
            fused
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<String>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Softmax output min-max scaled into [0, 1].
    pub nps: Vec<f64>,
}

impl Prediction {
    pub fn nps_of(&self, label: &str) -> Result<f64, CbrError> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.nps[i])
            .ok_or_else(|| CbrError::UnknownLabel(label.to_string()))
    }

    /// Labels by NPS descending, ties by label.
    pub fn ranking(&self) -> Vec<String> {
        let mut idx: Vec<usize> = (0..self.labels.len()).collect();
        idx.sort_by(|&a, &b| {
            self.nps[b]
                .total_cmp(&self.nps[a])
                .then_with(|| self.labels[a].cmp(&self.labels[b]))
        });
        idx.into_iter().map(|i| self.labels[i].clone()).collect()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    pub steps: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbrModel {
    pub format_version: u32,
    pub config: CbrConfig,
    pub config_hash: String,
    pub encoders: Vec<Encoder>,
    /// One row per encoder, one weight per fused layer.
    pub hidden_weights: Vec<Vec<f64>>,
    /// One weight per head.
    pub head_weights: Vec<f64>,
    pub heads: Vec<ClassifierHead>,
    pub label_space: Vec<String>,
}

struct Forward {
    /// [sample][encoder]
    encoded: Vec<Vec<(LayeredEmbedding, EncoderCache)>>,
    /// [head][sample]
    fused: Vec<Vec<Matrix>>,
    heads: Vec<HeadOutput>,
    /// [sample]
    logits: Vec<Vec<f64>>,
}

impl CbrModel {
    /// Fresh model: hidden weights 1, head weights 1/K.
    pub fn init(config: CbrConfig, label_space: Vec<String>) -> Result<Self, CbrError> {
        config.validate()?;
        if label_space.is_empty() {
            return Err(CbrError::EmptyTrain);
        }
        let encoders = config
            .encoders
            .iter()
            .cloned()
            .map(Encoder::new)
            .collect::<Result<Vec<_>, _>>()?;
        let k = config.k_layers;
        let in_dim: usize = config.encoders.iter().map(|e| e.dim).sum();
        let heads = (0..k)
            .map(|j| {
                ClassifierHead::new(
                    j,
                    in_dim,
                    config.filters,
                    label_space.len(),
                    config.dropout,
                    config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(j as u64 + 1),
                )
            })
            .collect();
        Ok(Self {
            format_version: CHECKPOINT_VERSION,
            config_hash: config.hash(),
            hidden_weights: vec![vec![1.0; k]; encoders.len()],
            head_weights: vec![1.0 / k as f64; k],
            heads,
            encoders,
            label_space,
            config,
        })
    }

    pub fn k(&self) -> usize {
        self.config.k_layers
    }

    pub fn label_index(&self, label: &str) -> Result<usize, CbrError> {
        self.label_space
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| CbrError::UnknownLabel(label.to_string()))
    }

    pub fn prepare(&self, text: &str) -> Result<Vec<Prepared>, CbrError> {
        let k = self.k();
        Ok(self
            .encoders
            .iter()
            .map(|e| e.prepare(text, k))
            .collect::<Result<_, _>>()?)
    }

    fn forward(
        &self,
        prepared: &[Vec<Prepared>],
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward, CbrError> {
        let k = self.k();
        let encoded: Vec<Vec<(LayeredEmbedding, EncoderCache)>> = prepared
            .iter()
            .map(|p| self.encoders.iter().zip(p).map(|(e, p)| e.forward(p, k)).collect())
            .collect();
        let mut fused: Vec<Vec<Matrix>> = vec![Vec::with_capacity(prepared.len()); k];
        for sample in &encoded {
            let embeddings: Vec<LayeredEmbedding> = sample.iter().map(|(e, _)| e.clone()).collect();
            for (j, m) in fuse_layers(&embeddings, &self.hidden_weights)?.into_iter().enumerate() {
                fused[j].push(m);
            }
        }
        let mut heads = Vec::with_capacity(k);
        for (head, inputs) in self.heads.iter().zip(&fused) {
            let refs: Vec<&Matrix> = inputs.iter().collect();
            heads.push(head.forward(&refs, mode, rng.as_deref_mut())?);
        }
        let logits = (0..prepared.len())
            .map(|s| {
                let mut acc = vec![0.0; self.label_space.len()];
                for (out, cw) in heads.iter().zip(&self.head_weights) {
                    axpy(*cw, &out.logits[s], &mut acc);
                }
                acc
            })
            .collect();
        Ok(Forward {
            encoded,
            fused,
            heads,
            logits,
        })
    }

    pub fn predict_text(&self, text: &str) -> Result<Prediction, CbrError> {
        let prepared = self.prepare(text)?;
        let fw = self.forward(std::slice::from_ref(&prepared), Mode::Infer, None)?;
        let logits = fw.logits.into_iter().next().unwrap();
        let probabilities = softmax(&logits);
        let nps = min_max(&probabilities);
        Ok(Prediction {
            labels: self.label_space.clone(),
            logits,
            probabilities,
            nps,
        })
    }

    pub fn predict(&self, report: &BugReport) -> Result<Prediction, CbrError> {
        self.predict_text(&report.normalized_text())
    }

    pub fn trainable_params(&self) -> Vec<&Vec<f64>> {
        let k = self.k();
        let mut v: Vec<&Vec<f64>> = self.hidden_weights.iter().collect();
        v.push(&self.head_weights);
        for h in &self.heads {
            v.extend(h.params());
        }
        for e in &self.encoders {
            v.extend(e.trainable_params(k));
        }
        v
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let k = self.config.k_layers;
        let mut v: Vec<&mut Vec<f64>> = self.hidden_weights.iter_mut().collect();
        v.push(&mut self.head_weights);
        for h in &mut self.heads {
            v.extend(h.params_mut());
        }
        for e in &mut self.encoders {
            v.extend(e.trainable_params_mut(k));
        }
        v
    }

    pub fn trainable_param_names(&self) -> Vec<String> {
        let k = self.k();
        let mut v: Vec<String> = self
            .encoders
            .iter()
            .map(|e| format!("hidden_weights.{}", e.spec().id))
            .collect();
        v.push("head_weights".into());
        for h in &self.heads {
            v.extend(h.param_names());
        }
        for e in &self.encoders {
            let n = e.trainable_params(k).len() / 3;
            for l in 0..n {
                let layer = e.spec().num_layers - k + l + 1;
                for p in ["w", "u", "b"] {
                    v.push(format!("{}.layer{layer}.{p}", e.spec().id));
                }
            }
        }
        v
    }

    fn loss_grads(
        &self,
        prepared: &[Vec<Prepared>],
        labels: &[usize],
        rng: Option<&mut ChaCha8Rng>,
        want_grads: bool,
    ) -> Result<(f64, Vec<Vec<f64>>, Vec<head::BatchStats>), CbrError> {
        let fw = self.forward(prepared, Mode::Train, rng)?;
        let batch = prepared.len() as f64;
        let mut loss = 0.0;
        let mut dlogits = Vec::with_capacity(prepared.len());
        for (logits, &y) in fw.logits.iter().zip(labels) {
            let p = softmax(logits);
            loss -= p[y].max(f64::MIN_POSITIVE).ln();
            let mut d = p;
            d[y] -= 1.0;
            d.iter_mut().for_each(|v| *v /= batch);
            dlogits.push(d);
        }
        loss /= batch;
        let stats: Vec<head::BatchStats> = fw.heads.iter().map(|h| h.stats.clone()).collect();
        if !want_grads {
            return Ok((loss, vec![], stats));
        }

        let k = self.k();
        let n_enc = self.encoders.len();
        let mut d_hw = vec![vec![0.0; k]; n_enc];
        let mut d_cw = vec![0.0; k];
        let mut head_grads = Vec::with_capacity(k);
        // [sample][encoder][layer]
        let mut d_layers: Vec<Vec<Vec<Matrix>>> = fw
            .encoded
            .iter()
            .map(|s| s.iter().map(|(e, _)| e.layers.iter().map(|l| Matrix::zeros(l.rows, l.cols)).collect()).collect())
            .collect();

        for j in 0..k {
            let out = &fw.heads[j];
            let cw = self.head_weights[j];
            let dhead: Vec<Vec<f64>> = dlogits
                .iter()
                .zip(&out.logits)
                .map(|(d, l)| {
                    d_cw[j] += dot(d, l);
                    d.iter().map(|v| v * cw).collect()
                })
                .collect();
            let refs: Vec<&Matrix> = fw.fused[j].iter().collect();
            let (g, dfused) = self.heads[j].backward(&refs, &out.cache, &dhead);
            head_grads.push(g);
            for (s, df) in dfused.iter().enumerate() {
                let mut off = 0;
                for (i, (emb, _)) in fw.encoded[s].iter().enumerate() {
                    let layer = &emb.layers[j];
                    let dl = &mut d_layers[s][i][j];
                    let hw = self.hidden_weights[i][j];
                    for r in 0..layer.rows {
                        let block = &df.row(r)[off..off + emb.dim];
                        d_hw[i][j] += dot(block, layer.row(r));
                        axpy(hw, block, dl.row_mut(r));
                    }
                    off += emb.dim;
                }
            }
        }

        let mut grads: Vec<Vec<f64>> = d_hw;
        grads.push(d_cw);
        grads.extend(head_grads.into_iter().flatten());
        for (i, enc) in self.encoders.iter().enumerate() {
            let mut acc: Vec<Vec<f64>> = Vec::new();
            for (s, sample) in fw.encoded.iter().enumerate() {
                let g = enc.backward(&prepared[s][i], &sample[i].1, &d_layers[s][i], k);
                if acc.is_empty() {
                    acc = g;
                } else {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        axpy(1.0, b, a);
                    }
                }
            }
            grads.extend(acc);
        }
        Ok((loss, grads, stats))
    }

    fn prepare_batch(&self, texts: &[&str]) -> Result<Vec<Vec<Prepared>>, CbrError> {
        texts.iter().map(|t| self.prepare(t)).collect()
    }

    /// Mean cross-entropy in training mode (batch statistics, no dropout).
    pub fn batch_loss(&self, texts: &[&str], labels: &[usize]) -> Result<f64, CbrError> {
        let prepared = self.prepare_batch(texts)?;
        Ok(self.loss_grads(&prepared, labels, None, false)?.0)
    }

    /// Loss and gradients aligned with [`CbrModel::trainable_params`], in
    /// training mode without dropout.
    pub fn batch_gradients(&self, texts: &[&str], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>), CbrError> {
        let prepared = self.prepare_batch(texts)?;
        let (loss, grads, _) = self.loss_grads(&prepared, labels, None, true)?;
        Ok((loss, grads))
    }

    pub fn save(&self, path: &Path) -> Result<(), CbrError> {
        let err = |reason: String| CbrError::Checkpoint {
            path: path.display().to_string(),
            reason,
        };
        let json = serde_json::to_vec(self).map_err(|e| err(e.to_string()))?;
        fs::write(path, json).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CbrError> {
        let err = |reason: String| CbrError::Checkpoint {
            path: path.display().to_string(),
            reason,
        };
        let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
        let model: CbrModel = serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
        if model.format_version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported format version {}", model.format_version)));
        }
        if model.config_hash != model.config.hash() {
            return Err(err("config hash mismatch".into()));
        }
        Ok(model)
    }
}

/// Trains a fresh model on the owner (or component) labels of `train`.
/// Batches are drawn with replacement according to `weights`.
pub fn train(
    train: &[BugReport],
    weights: &SampleWeights,
    config: &CbrConfig,
) -> Result<(CbrModel, TrainLog), CbrError> {
    if weights.as_slice().len() != train.len() {
        return Err(CbrError::Shape(format!(
            "{} sample weights for {} reports",
            weights.as_slice().len(),
            train.len()
        )));
    }
    let mode = config.label_mode;
    let labelled: Vec<(usize, &str)> = train
        .iter()
        .enumerate()
        .filter_map(|(i, r)| mode.label(r).map(|l| (i, l)))
        .collect();
    if labelled.is_empty() {
        return Err(CbrError::EmptyTrain);
    }
    let label_space: Vec<String> = labelled
        .iter()
        .map(|(_, l)| l.to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut model = CbrModel::init(config.clone(), label_space)?;

    let texts: Vec<String> = labelled.iter().map(|(i, _)| train[*i].normalized_text()).collect();
    let targets: Vec<usize> = labelled
        .iter()
        .map(|(_, l)| model.label_index(l))
        .collect::<Result<_, _>>()?;
    let sampler = WeightedIndex::new(labelled.iter().map(|(i, _)| weights.as_slice()[*i]))
        .map_err(|e| CbrError::Config(format!("sample weights: {e}")))?;

    let n = labelled.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let schedule = LinearSchedule::new(config.peak_lr, total, config.warmup_fraction);
    let mut opt = AdamW::new(config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog {
        step_losses: Vec::with_capacity(total),
        steps: total,
        epochs: config.epochs,
    };

    let mut step = 0;
    for epoch in 0..config.epochs {
        for batch in 0..steps_per_epoch {
            let idx: Vec<usize> = (0..config.batch_size.min(n.max(1)))
                .map(|_| sampler.sample(&mut rng))
                .collect();
            let prepared: Vec<Vec<Prepared>> = idx
                .iter()
                .map(|&i| model.prepare(&texts[i]))
                .collect::<Result<_, _>>()?;
            let labels: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            let (loss, grads, stats) = match model.loss_grads(&prepared, &labels, Some(&mut rng), true) {
                Ok(v) => v,
                Err(CbrError::NonFinite { .. }) => {
                    return Err(CbrError::Divergence {
                        epoch,
                        batch,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(CbrError::Divergence { epoch, batch, loss });
            }
            log.step_losses.push(loss);
            for (h, s) in model.heads.iter_mut().zip(&stats) {
                h.update_running_stats(s, config.bn_momentum);
            }
            let lr = schedule.rate(step);
            opt.step(model.trainable_params_mut(), &grads, lr);
            step += 1;
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Truncation;
    use chrono::{TimeZone, Utc};

    fn small_config(kinds: &[EncoderKind]) -> CbrConfig {
        CbrConfig {
            encoders: kinds
                .iter()
                .enumerate()
                .map(|(i, k)| EncoderSpec {
                    dim: 8,
                    num_layers: 3,
                    vocab_size: 64,
                    max_tokens: 16,
                    truncation: Truncation::Head,
                    seed: 7,
                    ..EncoderSpec::new(format!("e{i}"), *k)
                })
                .collect(),
            k_layers: 2,
            filters: 4,
            dropout: 0.0,
            batch_size: 4,
            epochs: 2,
            peak_lr: 1e-3,
            seed: 11,
            ..CbrConfig::default()
        }
    }

    fn report(id: usize, owner: &str, text: &str) -> BugReport {
        BugReport {
            id: id.to_string(),
            title: text.into(),
            description: String::new(),
            created_at: Utc.timestamp_opt(1_700_000_000 + id as i64, 0).unwrap(),
            owner: Some(owner.into()),
            components: vec![format!("comp-{owner}")],
            events: vec![],
        }
    }

    fn emb(id: &str, layers: Vec<Matrix>) -> LayeredEmbedding {
        LayeredEmbedding {
            encoder_id: id.into(),
            dim: layers[0].cols,
            layers,
        }
    }

    fn ramp(rows: usize, cols: usize, start: f64) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|i| start + i as f64).collect())
    }

    #[test]
    fn fuse_concatenates_dims() {
        let a = emb("a", vec![ramp(4, 64, 0.0), ramp(4, 64, 1.0)]);
        let b = emb("b", vec![ramp(4, 64, 2.0), ramp(4, 64, 3.0)]);
        let fused = fuse_layers(&[a, b], &[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(fused.len(), 2);
        assert_eq!(fused[0].cols, 128);
    }

    #[test]
    fn fuse_zero_and_identity() {
        let a = emb("a", vec![ramp(3, 2, 1.0)]);
        let zero = fuse_layers(std::slice::from_ref(&a), &[vec![0.0]]).unwrap();
        assert!(zero[0].data.iter().all(|v| *v == 0.0));
        let same = fuse_layers(std::slice::from_ref(&a), &[vec![1.0]]).unwrap();
        assert_eq!(same[0], a.layers[0]);
    }

    #[test]
    fn fuse_rejects_mismatch() {
        let a = emb("a", vec![ramp(3, 2, 1.0)]);
        let b = emb("b", vec![ramp(4, 2, 1.0)]);
        assert!(matches!(fuse_layers(&[a.clone(), b], &[vec![1.0], vec![1.0]]), Err(CbrError::Shape(_))));
        let c = emb("c", vec![ramp(3, 2, 1.0), ramp(3, 2, 1.0)]);
        assert!(matches!(fuse_layers(&[a, c], &[vec![1.0], vec![1.0, 1.0]]), Err(CbrError::Shape(_))));
    }

    #[test]
    fn single_head_soft_vote_is_identity() {
        let mut cfg = small_config(&[EncoderKind::HashedNgram]);
        cfg.k_layers = 1;
        let model = CbrModel::init(cfg, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        assert_eq!(model.head_weights, vec![1.0]);
        let text = "heap corruption in the collector";
        let pred = model.predict_text(text).unwrap();
        let prepared = model.prepare(text).unwrap();
        let fw = model.forward(&[prepared], Mode::Infer, None).unwrap();
        assert_eq!(pred.logits, fw.heads[0].logits[0]);
    }

    #[test]
    fn nps_properties() {
        let model = CbrModel::init(small_config(&[EncoderKind::HashedNgram, EncoderKind::Toy]), vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let pred = model.predict_text("segfault while compiling method").unwrap();
        assert!((pred.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert_eq!(argmax(&pred.nps), argmax(&pred.logits));
        assert!(pred.nps.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(pred.nps.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(pred.nps.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
        assert!(matches!(pred.nps_of("zed"), Err(CbrError::UnknownLabel(_))));
    }

    #[test]
    fn encoder_permutation_invariance() {
        let cfg = small_config(&[EncoderKind::HashedNgram, EncoderKind::Toy]);
        let mut model = CbrModel::init(cfg, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        model.hidden_weights = vec![vec![0.7, 1.3], vec![-0.4, 2.0]];
        let text = "gc pause exceeds limit";
        let before = model.predict_text(text).unwrap();

        // swap encoder order, hidden weight rows, and the matching input-column
        // blocks of every convolution filter
        let mut swapped = model.clone();
        swapped.encoders.swap(0, 1);
        swapped.hidden_weights.swap(0, 1);
        let dims: Vec<usize> = model.encoders.iter().map(|e| e.spec().dim).collect();
        let total: usize = dims.iter().sum();
        for head in &mut swapped.heads {
            for br in &mut head.branches {
                let span = br.width * total;
                for f in 0..head.filters {
                    for j in 0..br.width {
                        let base = f * span + j * total;
                        let row = br.w[base..base + total].to_vec();
                        let (a, b) = row.split_at(dims[0]);
                        let permuted: Vec<f64> = b.iter().chain(a).cloned().collect();
                        br.w[base..base + total].copy_from_slice(&permuted);
                    }
                }
            }
        }
        let after = swapped.predict_text(text).unwrap();
        for (x, y) in before.logits.iter().zip(&after.logits) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    fn fixture() -> Vec<BugReport> {
        let words = [
            ("alice", "gc heap collector pause"),
            ("bob", "jit compiler inline method"),
            ("carol", "build gradle makefile linker"),
        ];
        (0..12)
            .map(|i| {
                let (o, w) = words[i % 3];
                report(i, o, &format!("{w} issue number {i} {w}"))
            })
            .collect()
    }

    #[test]
    fn training_is_deterministic_and_respects_kpft() {
        let train_set = fixture();
        let weights = crate::corpus::sampling_weights(&train_set);
        let cfg = small_config(&[EncoderKind::HashedNgram, EncoderKind::Toy]);
        let (m1, _) = train(&train_set, &weights, &cfg).unwrap();
        let (m2, _) = train(&train_set, &weights, &cfg).unwrap();
        assert_eq!(m1, m2);

        let fresh = CbrModel::init(cfg.clone(), m1.label_space.clone()).unwrap();
        let (Encoder::Toy(before), Encoder::Toy(after)) = (&fresh.encoders[1], &m1.encoders[1]) else {
            panic!("second encoder is the toy encoder");
        };
        assert_eq!(before.embedding, after.embedding);
        assert_eq!(before.layers[0], after.layers[0]);
        assert_ne!(before.layers[2], after.layers[2]);
    }

    #[test]
    fn single_sample_loss_decreases() {
        let train_set = vec![report(0, "alice", "gc heap collector pause in young generation")];
        let weights = crate::corpus::sampling_weights(&train_set);
        let mut cfg = small_config(&[EncoderKind::HashedNgram, EncoderKind::Toy]);
        cfg.batch_size = 1;
        cfg.epochs = 10;
        let (_, log) = train(&train_set, &weights, &cfg).unwrap();
        assert_eq!(log.step_losses.len(), 10);
        // single label: loss is exactly zero
        assert!(log.step_losses.iter().all(|l| *l == 0.0));

        let two = vec![
            report(0, "alice", "gc heap collector pause in young generation"),
            report(1, "bob", "jit compiler inlines the wrong method"),
        ];
        let w = SampleWeights(vec![1.0, 0.0]);
        let (_, log) = train(&two, &w, &cfg).unwrap();
        for pair in log.step_losses.windows(2) {
            assert!(pair[1] < pair[0], "{:?}", log.step_losses);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let train_set = fixture();
        let weights = crate::corpus::sampling_weights(&train_set);
        let cfg = small_config(&[EncoderKind::Toy]);
        let (model, _) = train(&train_set, &weights, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = CbrModel::load(&path).unwrap();
        assert_eq!(loaded, model);
        let text = "gc heap collector pause";
        assert_eq!(loaded.predict_text(text).unwrap(), model.predict_text(text).unwrap());
    }

    #[test]
    fn component_mode_uses_first_component() {
        let train_set = fixture();
        let mut cfg = small_config(&[EncoderKind::HashedNgram]);
        cfg.label_mode = LabelMode::Component;
        let weights = crate::corpus::sampling_weights_by(&train_set, |r| LabelMode::Component.label(r));
        let (model, _) = train(&train_set, &weights, &cfg).unwrap();
        assert_eq!(model.label_space, vec!["comp-alice", "comp-bob", "comp-carol"]);
    }
}
