//! Layered text encoders.
//!
//! Each encoder owns its tokenizer and emits one `seq_len × dim` matrix per
//! layer. Two reference encoders are provided:
//!
//! * [`EncoderKind::HashedNgram`]: layer `n` carries hashed features of the
//!   n-gram ending at each token. It has no parameters, so it is frozen.
//! * [`EncoderKind::Toy`]: an embedding table followed by `L` stacked
//!   position-mixing affine layers with `tanh`. Only the top `k` layers are
//!   trainable (knowledge-preserving fine-tuning); the table and the lower
//!   layers never change.

use std::hash::Hasher;
use std::sync::OnceLock;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{affine_rows, axpy, Matrix};

pub const PAD_ID: u32 = 0;
pub const MAX_TOKENS: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("encoder {id}: requested {k} layers but it has {layers}")]
    BadLayerCount { id: String, k: usize, layers: usize },
    #[error("encoder {id}: invalid spec: {reason}")]
    BadSpec { id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    HashedNgram,
    Toy,
}

/// Which end of an over-long token sequence is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    #[default]
    Head,
    Tail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerStatus {
    Frozen,
    Trainable,
}

/// Layers `L-k+1 ..= L` are trainable, `1 ..= L-k` frozen (1-based).
pub fn kpft_layer_status(num_layers: usize, k: usize) -> Vec<LayerStatus> {
    (1..=num_layers)
        .map(|l| {
            if l + k > num_layers {
                LayerStatus::Trainable
            } else {
                LayerStatus::Frozen
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub id: String,
    pub kind: EncoderKind,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub truncation: Truncation,
    #[serde(default)]
    pub seed: u64,
}

fn default_dim() -> usize {
    64
}
fn default_layers() -> usize {
    3
}
fn default_vocab() -> usize {
    4096
}
fn default_max_tokens() -> usize {
    MAX_TOKENS
}

impl EncoderSpec {
    pub fn new(id: impl Into<String>, kind: EncoderKind) -> Self {
        Self {
            id: id.into(),
            kind,
            dim: default_dim(),
            num_layers: default_layers(),
            vocab_size: default_vocab(),
            max_tokens: default_max_tokens(),
            truncation: Truncation::Head,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |reason: &str| {
            Err(EncoderError::BadSpec {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.num_layers == 0 {
            return bad("num_layers must be positive");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.max_tokens == 0 || self.max_tokens > MAX_TOKENS {
            return bad("max_tokens must lie in 1..=256");
        }
        Ok(())
    }

    pub fn check_k(&self, k: usize) -> Result<(), EncoderError> {
        if k == 0 || k > self.num_layers {
            return Err(EncoderError::BadLayerCount {
                id: self.id.clone(),
                k,
                layers: self.num_layers,
            });
        }
        Ok(())
    }

    /// Per-layer training status when the top `k` layers feed classifiers.
    pub fn trainable_layer_map(&self, k: usize) -> Vec<LayerStatus> {
        match self.kind {
            EncoderKind::HashedNgram => vec![LayerStatus::Frozen; self.num_layers],
            EncoderKind::Toy => kpft_layer_status(self.num_layers, k),
        }
    }

    fn hash_seed(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write(self.id.as_bytes());
        h.write_u64(self.seed);
        h.finish()
    }
}

/// Token ids padded with [`PAD_ID`] to the encoder's `max_tokens`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    /// Number of non-padding tokens.
    pub length: usize,
}

fn word_pattern() -> &'static Regex {
    static P: OnceLock<Regex> = OnceLock::new();
    P.get_or_init(|| Regex::new(r"<hex>|[\p{L}\p{N}_]+").unwrap())
}

/// Lowercases, splits on whitespace and punctuation, hashes words into the
/// encoder's vocabulary and pads or truncates to `max_tokens`.
pub fn tokenize(text: &str, spec: &EncoderSpec) -> TokenSequence {
    let lower = text.to_lowercase();
    let seed = spec.hash_seed();
    let mut ids: Vec<u32> = word_pattern()
        .find_iter(&lower)
        .map(|m| {
            let mut h = FnvHasher::with_key(seed);
            h.write(m.as_str().as_bytes());
            1 + (h.finish() % (spec.vocab_size as u64 - 1)) as u32
        })
        .collect();
    if ids.len() > spec.max_tokens {
        ids = match spec.truncation {
            Truncation::Head => ids[..spec.max_tokens].to_vec(),
            Truncation::Tail => ids[ids.len() - spec.max_tokens..].to_vec(),
        };
    }
    let length = ids.len();
    ids.resize(spec.max_tokens, PAD_ID);
    TokenSequence { tokens: ids, length }
}

/// The last `k` layers of one encoder for one text, lowest layer first.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredEmbedding {
    pub encoder_id: String,
    pub dim: usize,
    pub layers: Vec<Matrix>,
}

impl LayeredEmbedding {
    pub fn seq_len(&self) -> usize {
        self.layers.first().map_or(0, |m| m.rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLayer {
    /// dim × dim, applied to the token itself.
    pub w: Vec<f64>,
    /// dim × dim, applied to the sum of the two neighbouring tokens.
    pub u: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoder {
    pub spec: EncoderSpec,
    pub embedding: Vec<f64>,
    pub layers: Vec<ToyLayer>,
}

impl ToyEncoder {
    pub fn new(spec: EncoderSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.hash_seed());
        let d = spec.dim;
        let embedding = (0..spec.vocab_size * d)
            .map(|i| {
                if i < d {
                    0.0 // padding row
                } else {
                    rng.gen_range(-0.5..0.5)
                }
            })
            .collect();
        let a = (3.0 / d as f64).sqrt();
        let layers = (0..spec.num_layers)
            .map(|_| ToyLayer {
                w: (0..d * d).map(|_| rng.gen_range(-a..a)).collect(),
                u: (0..d * d).map(|_| rng.gen_range(-a..a) * 0.5).collect(),
                b: vec![0.0; d],
            })
            .collect();
        Self {
            spec,
            embedding,
            layers,
        }
    }

    fn embed(&self, seq: &TokenSequence) -> Matrix {
        let d = self.spec.dim;
        let mut m = Matrix::zeros(seq.tokens.len(), d);
        for (p, &t) in seq.tokens.iter().enumerate().take(seq.length) {
            let t = t as usize;
            m.row_mut(p).copy_from_slice(&self.embedding[t * d..(t + 1) * d]);
        }
        m
    }

    fn layer_forward(&self, layer: &ToyLayer, input: &Matrix, length: usize) -> Matrix {
        let d = self.spec.dim;
        let mut neigh = Matrix::zeros(input.rows, d);
        for p in 0..length {
            let n = neigh.row_mut(p);
            if p > 0 {
                n.copy_from_slice(input.row(p - 1));
            }
            if p + 1 < length {
                axpy(1.0, input.row(p + 1), n);
            }
        }
        let mut out = affine_rows(input, &layer.w, &layer.b, d);
        let mixed = affine_rows(&neigh, &layer.u, &vec![0.0; d], d);
        for p in 0..out.rows {
            let row = out.row_mut(p);
            if p < length {
                for (o, m) in row.iter_mut().zip(mixed.row(p)) {
                    *o = (*o + m).tanh();
                }
            } else {
                row.fill(0.0);
            }
        }
        out
    }

    /// Gradients for one layer plus the gradient w.r.t. its input.
    fn layer_backward(
        &self,
        layer: &ToyLayer,
        input: &Matrix,
        output: &Matrix,
        grad_out: &Matrix,
        length: usize,
    ) -> (ToyLayer, Matrix) {
        let d = self.spec.dim;
        let mut g = ToyLayer {
            w: vec![0.0; d * d],
            u: vec![0.0; d * d],
            b: vec![0.0; d],
        };
        let mut grad_in = Matrix::zeros(input.rows, d);
        let mut dpre = vec![0.0; d];
        let mut neigh = vec![0.0; d];
        for p in 0..length {
            for j in 0..d {
                let y = output.get(p, j);
                dpre[j] = grad_out.get(p, j) * (1.0 - y * y);
            }
            neigh.fill(0.0);
            if p > 0 {
                axpy(1.0, input.row(p - 1), &mut neigh);
            }
            if p + 1 < length {
                axpy(1.0, input.row(p + 1), &mut neigh);
            }
            for i in 0..d {
                let x = input.get(p, i);
                if x != 0.0 {
                    axpy(x, &dpre, &mut g.w[i * d..(i + 1) * d]);
                }
                if neigh[i] != 0.0 {
                    axpy(neigh[i], &dpre, &mut g.u[i * d..(i + 1) * d]);
                }
            }
            axpy(1.0, &dpre, &mut g.b);
            // back through W (own token) and U (both neighbours)
            for i in 0..d {
                let own: f64 = crate::tensor::dot(&layer.w[i * d..(i + 1) * d], &dpre);
                grad_in.row_mut(p)[i] += own;
                let via_u: f64 = crate::tensor::dot(&layer.u[i * d..(i + 1) * d], &dpre);
                if p > 0 {
                    grad_in.row_mut(p - 1)[i] += via_u;
                }
                if p + 1 < length {
                    grad_in.row_mut(p + 1)[i] += via_u;
                }
            }
        }
        (g, grad_in)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Encoder {
    HashedNgram { spec: EncoderSpec },
    Toy(ToyEncoder),
}

/// Everything about a text that does not depend on trainable parameters.
#[derive(Debug, Clone)]
pub struct Prepared {
    length: usize,
    /// Hashed: the `k` output layers. Toy: the input to the first trainable layer.
    base: Vec<Matrix>,
}

/// Activations retained for the backward pass of the toy encoder.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    /// Input to the first trainable layer followed by every trainable output.
    hidden: Vec<Matrix>,
}

impl Encoder {
    pub fn new(spec: EncoderSpec) -> Result<Self, EncoderError> {
        spec.validate()?;
        Ok(match spec.kind {
            EncoderKind::HashedNgram => Encoder::HashedNgram { spec },
            EncoderKind::Toy => Encoder::Toy(ToyEncoder::new(spec)),
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        match self {
            Encoder::HashedNgram { spec } => spec,
            Encoder::Toy(t) => &t.spec,
        }
    }

    pub fn prepare(&self, text: &str, k: usize) -> Result<Prepared, EncoderError> {
        let spec = self.spec();
        spec.check_k(k)?;
        let seq = tokenize(text, spec);
        let base = match self {
            Encoder::HashedNgram { spec } => (spec.num_layers - k + 1..=spec.num_layers)
                .map(|n| hashed_layer(spec, &seq, n))
                .collect(),
            Encoder::Toy(t) => {
                let mut h = t.embed(&seq);
                for layer in &t.layers[..t.spec.num_layers - k] {
                    h = t.layer_forward(layer, &h, seq.length);
                }
                vec![h]
            }
        };
        Ok(Prepared {
            length: seq.length,
            base,
        })
    }

    /// Runs the trainable part of the encoder.
    pub fn forward(&self, prepared: &Prepared, k: usize) -> (LayeredEmbedding, EncoderCache) {
        let spec = self.spec();
        let layers = match self {
            Encoder::HashedNgram { .. } => {
                return (
                    LayeredEmbedding {
                        encoder_id: spec.id.clone(),
                        dim: spec.dim,
                        layers: prepared.base.clone(),
                    },
                    EncoderCache { hidden: vec![] },
                )
            }
            Encoder::Toy(t) => {
                let mut hidden = vec![prepared.base[0].clone()];
                for layer in &t.layers[t.spec.num_layers - k..] {
                    let next = t.layer_forward(layer, hidden.last().unwrap(), prepared.length);
                    hidden.push(next);
                }
                hidden
            }
        };
        (
            LayeredEmbedding {
                encoder_id: spec.id.clone(),
                dim: spec.dim,
                layers: layers[1..].to_vec(),
            },
            EncoderCache { hidden: layers },
        )
    }

    pub fn encode(&self, text: &str, k: usize) -> Result<LayeredEmbedding, EncoderError> {
        let prepared = self.prepare(text, k)?;
        Ok(self.forward(&prepared, k).0)
    }

    /// Gradients of the trainable parameters, in the order of
    /// [`Encoder::trainable_params_mut`], given gradients w.r.t. each of the
    /// `k` output layers.
    pub fn backward(
        &self,
        prepared: &Prepared,
        cache: &EncoderCache,
        grad_layers: &[Matrix],
        k: usize,
    ) -> Vec<Vec<f64>> {
        let Encoder::Toy(t) = self else {
            return vec![];
        };
        let first = t.spec.num_layers - k;
        let mut grads: Vec<ToyLayer> = Vec::with_capacity(k);
        let mut carry: Option<Matrix> = None;
        for j in (0..k).rev() {
            let mut g = grad_layers[j].clone();
            if let Some(c) = carry.take() {
                axpy(1.0, &c.data, &mut g.data);
            }
            let (lg, gin) = t.layer_backward(
                &t.layers[first + j],
                &cache.hidden[j],
                &cache.hidden[j + 1],
                &g,
                prepared.length,
            );
            grads.push(lg);
            carry = Some(gin);
        }
        grads.reverse();
        grads.into_iter().flat_map(|g| [g.w, g.u, g.b]).collect()
    }

    pub fn trainable_params_mut(&mut self, k: usize) -> Vec<&mut Vec<f64>> {
        match self {
            Encoder::HashedNgram { .. } => vec![],
            Encoder::Toy(t) => {
                let first = t.spec.num_layers - k;
                t.layers[first..]
                    .iter_mut()
                    .flat_map(|l| [&mut l.w, &mut l.u, &mut l.b])
                    .collect()
            }
        }
    }

    pub fn trainable_params(&self, k: usize) -> Vec<&Vec<f64>> {
        match self {
            Encoder::HashedNgram { .. } => vec![],
            Encoder::Toy(t) => {
                let first = t.spec.num_layers - k;
                t.layers[first..]
                    .iter()
                    .flat_map(|l| [&l.w, &l.u, &l.b])
                    .collect()
            }
        }
    }
}

/// Feature vector for the n-gram of order `n` ending at each token. Tokens
/// near the start use the shorter available prefix.
fn hashed_layer(spec: &EncoderSpec, seq: &TokenSequence, n: usize) -> Matrix {
    let seed = spec.hash_seed();
    let mut m = Matrix::zeros(seq.tokens.len(), spec.dim);
    for p in 0..seq.length {
        let start = (p + 1).saturating_sub(n);
        let mut h = FnvHasher::with_key(seed);
        h.write_usize(n);
        for &t in &seq.tokens[start..=p] {
            h.write_u32(t);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        for v in m.row_mut(p) {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    m
}
