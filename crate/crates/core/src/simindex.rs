//! Similar-issue retrieval over precomputed unit embeddings.
//!
//! Embeddings come from an [`EmbeddingProvider`]: either the in-process
//! [`ReferenceProvider`] (hashed bag of words projected to the unit sphere) or
//! a [`RemoteProvider`] speaking the `/info` + `/embed` JSON protocol.
//! Vectors are normalized when the index is built, so retrieval is an exact
//! linear scan of dot products.
//!
//! On-disk layout (little endian):
//!
//! ```text
//! b"TRXSIDX\0" | u32 header_len | header JSON {format_version, provider_id, dim, count}
//! count × ( u32 id_len | id bytes | i64 created_at secs | u32 nanos | dim × f64 )
//! ```

use std::fs;
use std::hash::Hasher;
use std::path::Path;
use std::sync::OnceLock;

use chrono::{DateTime, TimeZone, Utc};
use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::BugReport;

const MAGIC: &[u8; 8] = b"TRXSIDX\0";
pub const INDEX_FORMAT_VERSION: u32 = 1;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("degenerate (zero-norm) vector{}", .0.as_ref().map(|id| format!(" for {id}")).unwrap_or_default())]
    DegenerateVector(Option<String>),
    #[error("vector dimension {got} does not match {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("index was built by provider {existing:?} (dim {existing_dim}), not {provider:?} (dim {dim})")]
    ProviderMismatch {
        existing: String,
        existing_dim: usize,
        provider: String,
        dim: usize,
    },
    #[error("similarity threshold must lie in [0, 1], got {0}")]
    BadThreshold(f64),
    #[error("index is empty")]
    Empty,
    #[error("embedding provider {provider}: {detail}")]
    Provider { provider: String, detail: String },
    #[error("index file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    /// One vector per text, in order.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, IndexError>;
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, IndexError> {
    if u.len() != v.len() {
        return Err(IndexError::DimMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(IndexError::DegenerateVector(None));
    }
    let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((d / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn unit(v: &[f64]) -> Result<Vec<f64>, IndexError> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(IndexError::DegenerateVector(None));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn word_pattern() -> &'static Regex {
    static P: OnceLock<Regex> = OnceLock::new();
    P.get_or_init(|| Regex::new(r"<hex>|[\p{L}\p{N}_]+").unwrap())
}

/// Hashed bag of words: every distinct lowercase word contributes a fixed
/// pseudo-random direction, weighted by its count.
#[derive(Debug, Clone)]
pub struct ReferenceProvider {
    id: String,
    dim: usize,
    seed: u64,
}

impl ReferenceProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            id: format!("reference-bow-{dim}-{seed}"),
            dim,
            seed,
        }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        for m in word_pattern().find_iter(&lower) {
            let mut h = FnvHasher::with_key(self.seed);
            h.write(m.as_str().as_bytes());
            let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
            for x in v.iter_mut() {
                *x += rng.gen_range(-1.0..1.0);
            }
        }
        v
    }
}

impl Default for ReferenceProvider {
    fn default() -> Self {
        Self::new(256, 0)
    }
}

impl EmbeddingProvider for ReferenceProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, IndexError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// `GET /info` response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderInfo {
    pub model: String,
    pub dim: usize,
}

/// `POST /embed` request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

/// `POST /embed` response body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub model: String,
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
}

impl EmbedResponse {
    /// Checks the response against the handshake and the request size.
    pub fn validate(&self, info: &ProviderInfo, expected: usize) -> Result<(), String> {
        if self.dim != info.dim {
            return Err(format!("response dim {} differs from /info dim {}", self.dim, info.dim));
        }
        if self.vectors.len() != expected {
            return Err(format!("{} vectors for {expected} texts", self.vectors.len()));
        }
        if let Some((i, v)) = self.vectors.iter().enumerate().find(|(_, v)| v.len() != info.dim) {
            return Err(format!("vector {i} has length {} instead of {}", v.len(), info.dim));
        }
        if self.vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err("non-finite vector component".into());
        }
        Ok(())
    }
}

#[cfg(feature = "remote")]
pub use remote::RemoteProvider;

#[cfg(feature = "remote")]
mod remote {
    use super::*;

    const BATCH: usize = 64;

    /// Client for an embedding service exposing `GET /info` and `POST /embed`.
    #[derive(Debug, Clone)]
    pub struct RemoteProvider {
        base: String,
        info: ProviderInfo,
        id: String,
    }

    impl RemoteProvider {
        pub fn connect(base_url: &str) -> Result<Self, IndexError> {
            let base = base_url.trim_end_matches('/').to_string();
            let fail = |detail: String| IndexError::Provider {
                provider: base.clone(),
                detail,
            };
            let info: ProviderInfo = ureq::get(&format!("{base}/info"))
                .call()
                .map_err(|e| fail(format!("GET /info: {e}")))?
                .body_mut()
                .read_json()
                .map_err(|e| fail(format!("GET /info: bad body: {e}")))?;
            if info.dim == 0 {
                return Err(fail("/info reports dim 0".into()));
            }
            Ok(Self {
                id: format!("remote:{}", info.model),
                base,
                info,
            })
        }

        pub fn info(&self) -> &ProviderInfo {
            &self.info
        }
    }

    impl EmbeddingProvider for RemoteProvider {
        fn id(&self) -> &str {
            &self.id
        }

        fn dim(&self) -> usize {
            self.info.dim
        }

        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, IndexError> {
            let fail = |detail: String| IndexError::Provider {
                provider: self.base.clone(),
                detail,
            };
            let mut out = Vec::with_capacity(texts.len());
            for chunk in texts.chunks(BATCH) {
                let body = EmbedRequest {
                    texts: chunk.to_vec(),
                };
                let resp: EmbedResponse = ureq::post(&format!("{}/embed", self.base))
                    .send_json(&body)
                    .map_err(|e| fail(format!("POST /embed: {e}")))?
                    .body_mut()
                    .read_json()
                    .map_err(|e| fail(format!("POST /embed: bad body: {e}")))?;
                resp.validate(&self.info, chunk.len()).map_err(fail)?;
                out.extend(resp.vectors);
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub vector: Vec<f64>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexHeader {
    format_version: u32,
    provider_id: String,
    dim: usize,
    count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityIndex {
    pub provider_id: String,
    pub dim: usize,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    /// Position of the issue in the index.
    pub position: usize,
    pub similarity: f64,
}

/// Embeds the normalized text of every training issue.
pub fn build_index(train: &[BugReport], provider: &dyn EmbeddingProvider) -> Result<SimilarityIndex, IndexError> {
    let texts: Vec<String> = train.iter().map(BugReport::normalized_text).collect();
    let vectors = provider.embed(&texts)?;
    if vectors.len() != train.len() {
        return Err(IndexError::Provider {
            provider: provider.id().to_string(),
            detail: format!("{} vectors for {} texts", vectors.len(), train.len()),
        });
    }
    let entries = train
        .iter()
        .zip(vectors)
        .map(|(r, v)| {
            if v.len() != provider.dim() {
                return Err(IndexError::DimMismatch {
                    expected: provider.dim(),
                    got: v.len(),
                });
            }
            let vector = unit(&v).map_err(|_| IndexError::DegenerateVector(Some(r.id.clone())))?;
            Ok(IndexEntry {
                id: r.id.clone(),
                vector,
                created_at: r.created_at,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SimilarityIndex {
        provider_id: provider.id().to_string(),
        dim: provider.dim(),
        entries,
    })
}

/// Builds the index and writes it to `path`. An existing index there must
/// come from the same provider and dimension.
pub fn build_index_at(
    path: &Path,
    train: &[BugReport],
    provider: &dyn EmbeddingProvider,
) -> Result<SimilarityIndex, IndexError> {
    if path.exists() {
        let header = SimilarityIndex::read_header(path)?;
        if header.dim != provider.dim() || header.provider_id != provider.id() {
            return Err(IndexError::ProviderMismatch {
                existing: header.provider_id,
                existing_dim: header.dim,
                provider: provider.id().to_string(),
                dim: provider.dim(),
            });
        }
    }
    let index = build_index(train, provider)?;
    index.save(path)?;
    Ok(index)
}

impl SimilarityIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Unit embedding of an arbitrary text with the index's provider.
    pub fn embed_query(&self, provider: &dyn EmbeddingProvider, text: &str) -> Result<Vec<f64>, IndexError> {
        if provider.id() != self.provider_id || provider.dim() != self.dim {
            return Err(IndexError::ProviderMismatch {
                existing: self.provider_id.clone(),
                existing_dim: self.dim,
                provider: provider.id().to_string(),
                dim: provider.dim(),
            });
        }
        let v = provider
            .embed(&[text.to_string()])?
            .pop()
            .ok_or_else(|| IndexError::Provider {
                provider: provider.id().to_string(),
                detail: "no vector returned".into(),
            })?;
        if v.len() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        unit(&v)
    }

    /// Every indexed issue with cosine similarity ≥ `tau`, most similar
    /// first, ties by issue id.
    pub fn retrieve(&self, query: &[f64], tau: f64) -> Result<Vec<Hit>, IndexError> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(IndexError::BadThreshold(tau));
        }
        if self.entries.is_empty() {
            return Err(IndexError::Empty);
        }
        if query.len() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let q = unit(query)?;
        let mut hits: Vec<Hit> = self
            .entries
            .iter()
            .enumerate()
            .filter_map(|(position, e)| {
                let s: f64 = e.vector.iter().zip(&q).map(|(a, b)| a * b).sum();
                let similarity = s.clamp(-1.0, 1.0);
                (similarity >= tau).then(|| Hit {
                    id: e.id.clone(),
                    position,
                    similarity,
                })
            })
            .collect();
        hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.id.cmp(&b.id)));
        Ok(hits)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = IndexHeader {
            format_version: INDEX_FORMAT_VERSION,
            provider_id: self.provider_id.clone(),
            dim: self.dim,
            count: self.entries.len(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.entries.len() * (24 + self.dim * 8));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.entries {
            out.extend_from_slice(&(e.id.len() as u32).to_le_bytes());
            out.extend_from_slice(e.id.as_bytes());
            out.extend_from_slice(&e.created_at.timestamp().to_le_bytes());
            out.extend_from_slice(&e.created_at.timestamp_subsec_nanos().to_le_bytes());
            for x in &e.vector {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, IndexError> {
        let fail = |reason: &str| IndexError::Format {
            path: origin.to_string(),
            reason: reason.to_string(),
        };
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8).ok_or_else(|| fail("truncated magic"))? != MAGIC {
            return Err(fail("bad magic"));
        }
        let header = parse_header(&mut cur).map_err(|r| fail(&r))?;
        let mut entries = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            let id_len = cur.u32().ok_or_else(|| fail("truncated entry"))? as usize;
            let id = std::str::from_utf8(cur.take(id_len).ok_or_else(|| fail("truncated id"))?)
                .map_err(|_| fail("id is not utf-8"))?
                .to_string();
            let secs = i64::from_le_bytes(cur.take(8).ok_or_else(|| fail("truncated timestamp"))?.try_into().unwrap());
            let nanos = cur.u32().ok_or_else(|| fail("truncated timestamp"))?;
            let created_at = Utc
                .timestamp_opt(secs, nanos)
                .single()
                .ok_or_else(|| fail("invalid timestamp"))?;
            let raw = cur.take(header.dim * 8).ok_or_else(|| fail("truncated vector"))?;
            let vector: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if (norm(&vector) - 1.0).abs() > NORM_TOLERANCE {
                return Err(fail(&format!("vector for {id} is not unit length")));
            }
            entries.push(IndexEntry { id, vector, created_at });
        }
        if cur.pos != bytes.len() {
            return Err(fail("trailing bytes"));
        }
        Ok(Self {
            provider_id: header.provider_id,
            dim: header.dim,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        fs::write(path, self.to_bytes()).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = fs::read(path).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    fn read_header(path: &Path) -> Result<IndexHeader, IndexError> {
        let bytes = fs::read(path).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let fail = |reason: String| IndexError::Format {
            path: path.display().to_string(),
            reason,
        };
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8) != Some(MAGIC.as_slice()) {
            return Err(fail("bad magic".into()));
        }
        parse_header(&mut cur).map_err(fail)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

fn parse_header(cur: &mut Cursor<'_>) -> Result<IndexHeader, String> {
    let len = cur.u32().ok_or("truncated header length")? as usize;
    let raw = cur.take(len).ok_or("truncated header")?;
    let header: IndexHeader = serde_json::from_slice(raw).map_err(|e| format!("bad header: {e}"))?;
    if header.format_version != INDEX_FORMAT_VERSION {
        return Err(format!("unsupported format version {}", header.format_version));
    }
    Ok(header)
}
