#![allow(dead_code)]

use std::fs;
use std::path::Path;

use chrono::{Duration, TimeZone, Utc};
use serde_json::json;
use triage_core::cbr::CbrConfig;
use triage_core::config::{EmbeddingConfig, EngineConfig};
use triage_core::encoder::{EncoderKind, EncoderSpec};

const TOPICS: [(&str, &str); 3] = [
    ("alice", "parser rejects nested generic closures in trait bounds after the macro expansion step"),
    ("bob", "network socket times out during tls handshake when the proxy rewrites headers"),
    ("carol", "gpu shader cache grows without bound and the renderer leaks texture memory"),
];

/// Thirty issues, ten per developer, each with an assignment and a commit.
pub fn corpus() -> Vec<serde_json::Value> {
    let t0 = Utc.with_ymd_and_hms(2024, 3, 1, 12, 0, 0).unwrap();
    (0..30)
        .map(|i| {
            let (dev, text) = TOPICS[i % 3];
            let at = t0 + Duration::days(7 * i as i64);
            json!({
                "id": format!("T-{i}"),
                "title": text.split_whitespace().take(3).collect::<Vec<_>>().join(" "),
                "description": format!("{text} (case {i})"),
                "created_at": at.to_rfc3339(),
                "events": [
                    {"actor": dev, "kind": "assigned", "occurred_at": (at + Duration::hours(1)).to_rfc3339()},
                    {"actor": dev, "kind": "commit", "occurred_at": (at + Duration::days(2)).to_rfc3339()},
                ],
            })
        })
        .collect()
}

pub fn config(workdir: &Path) -> EngineConfig {
    let spec = |id: &str, kind| EncoderSpec {
        dim: 16,
        num_layers: 2,
        vocab_size: 256,
        max_tokens: 32,
        ..EncoderSpec::new(id, kind)
    };
    let mut cfg = EngineConfig::default();
    cfg.data.raw = Some(workdir.join("raw.jsonl"));
    cfg.data.workdir = workdir.to_path_buf();
    cfg.data.active_threshold = 3;
    cfg.cbr = CbrConfig {
        encoders: vec![spec("ngram", EncoderKind::HashedNgram), spec("toy", EncoderKind::Toy)],
        k_layers: 2,
        filters: 4,
        batch_size: 8,
        epochs: 6,
        peak_lr: 5e-3,
        ..CbrConfig::default()
    };
    cfg.embedding = EmbeddingConfig::Reference { dim: 64, seed: 1 };
    cfg.tuning.coordinate_subset = true;
    cfg
}

/// Writes the raw export and the config file, returning the config path.
pub fn setup(workdir: &Path) -> std::path::PathBuf {
    let cfg = config(workdir);
    let rows: String = corpus().iter().map(|r| format!("{r}\n")).collect();
    fs::write(cfg.data.raw.as_ref().unwrap(), rows).unwrap();
    let path = workdir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

pub const PARSER_QUERY: &str = "parser rejects nested generic closures in trait bounds";
