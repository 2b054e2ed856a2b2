#![allow(dead_code)]

use std::fs;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use serde_json::json;

use triage_core::cbr::CbrConfig;
use triage_core::config::{EmbeddingConfig, EngineConfig};
use triage_core::encoder::{EncoderKind, EncoderSpec, Truncation};

pub const GC: &str = "garbage collector pause spikes during heap compaction when concurrent marking threads stall under heavy allocation pressure in production";
pub const JIT: &str = "jit compiler crashes while inlining virtual method calls with deep polymorphic dispatch chains in optimized tier code";
pub const BUILD: &str = "build script fails linking native libraries on windows because cmake toolchain paths contain spaces and unicode characters";

/// Days between consecutive issues.
pub const SPACING: i64 = 20;

pub fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2023, 1, 1, 9, 0, 0).unwrap()
}

pub fn spec(id: &str, kind: EncoderKind, dim: usize, max_tokens: usize, truncation: Truncation, seed: u64) -> EncoderSpec {
    EncoderSpec {
        dim,
        num_layers: 3,
        vocab_size: 512,
        max_tokens,
        truncation,
        seed,
        ..EncoderSpec::new(id, kind)
    }
}

fn raw(id: usize, owner: &str, text: &str, created: DateTime<Utc>) -> serde_json::Value {
    let ts = |t: DateTime<Utc>| t.to_rfc3339();
    json!({
        "id": format!("I-{id:03}"),
        "title": text.split_whitespace().take(4).collect::<Vec<_>>().join(" "),
        "description": text,
        "created_at": ts(created),
        "components": [],
        "events": [
            {"actor": owner, "kind": "assignment", "occurred_at": ts(created + Duration::hours(2))},
            {"actor": owner, "kind": "commit_or_pr", "occurred_at": ts(created + Duration::days(1))},
        ],
    })
}

/// Three topics with drifting ownership. Early GC issues belong to alice
/// and later ones to bob, JIT the other way round, BUILD is always carol's.
/// Each owner also commits on their own issues. The test period continues
/// the late owners, so the content model (trained on the majority) misses
/// GC and JIT test issues while recent interactions point at the right
/// developer.
pub fn drift_corpus() -> Vec<serde_json::Value> {
    let owner = |j: usize, early: &'static str, late: &'static str| -> &'static str {
        if [5, 15, 25].contains(&j) {
            return "carol";
        }
        let m = j - [5, 15, 25].iter().filter(|&&c| c < j).count();
        if m < 17 {
            early
        } else {
            late
        }
    };
    let mut out = Vec::new();
    let mut g = 0;
    for j in 0..30 {
        out.push(raw(g, owner(j, "alice", "bob"), GC, epoch() + Duration::days(SPACING * g as i64)));
        g += 1;
        out.push(raw(g, owner(j, "bob", "alice"), JIT, epoch() + Duration::days(SPACING * g as i64)));
        g += 1;
        if j < 24 {
            out.push(raw(g, "carol", BUILD, epoch() + Duration::days(SPACING * g as i64)));
            g += 1;
        }
    }
    for j in 0..8 {
        out.push(raw(g, "bob", GC, epoch() + Duration::days(SPACING * g as i64)));
        g += 1;
        out.push(raw(g, "alice", JIT, epoch() + Duration::days(SPACING * g as i64)));
        g += 1;
        if j < 4 {
            out.push(raw(g, "carol", BUILD, epoch() + Duration::days(SPACING * g as i64)));
            g += 1;
        }
    }
    out
}

pub fn write_jsonl(path: &Path, rows: &[serde_json::Value]) {
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    fs::write(path, text).unwrap();
}

pub fn small_cbr(seed: u64) -> CbrConfig {
    CbrConfig {
        encoders: vec![
            spec("ngram", EncoderKind::HashedNgram, 16, 32, Truncation::Head, 1),
            spec("toy", EncoderKind::Toy, 16, 32, Truncation::Head, 2),
        ],
        k_layers: 2,
        filters: 8,
        dropout: 0.1,
        batch_size: 8,
        epochs: 12,
        peak_lr: 5e-3,
        seed,
        ..CbrConfig::default()
    }
}

/// Config for the drift corpus, with all artifacts under `workdir`.
pub fn drift_config(workdir: &Path) -> EngineConfig {
    let mut cfg = EngineConfig::default();
    cfg.data.raw = Some(workdir.join("raw.jsonl"));
    cfg.data.workdir = workdir.to_path_buf();
    cfg.data.train_fraction = 0.81;
    cfg.data.validation_fraction = 0.099;
    cfg.cbr = small_cbr(3);
    cfg.embedding = EmbeddingConfig::Reference { dim: 256, seed: 0 };
    cfg.tuning.coordinate_subset = true;
    cfg
}
