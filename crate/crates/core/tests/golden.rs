//! Frozen predictions of a small seeded model. A change here means training
//! or inference arithmetic changed.

mod common;

use triage_core::cbr::{self, CbrModel};
use triage_core::corpus::{self, BugReport};

use common::*;

fn model() -> CbrModel {
    let texts = [("alice", GC), ("bob", JIT), ("carol", BUILD)];
    let train: Vec<BugReport> = (0..9)
        .map(|i| {
            let (owner, text) = texts[i % 3];
            BugReport {
                id: format!("g{i}"),
                title: format!("case {i}"),
                description: text.into(),
                created_at: epoch(),
                owner: Some(owner.into()),
                components: vec![],
                events: vec![],
            }
        })
        .collect();
    let mut cfg = small_cbr(42);
    cfg.epochs = 3;
    let (model, _) = cbr::train(&train, &corpus::sampling_weights(&train), &cfg).unwrap();
    model
}

#[test]
fn frozen_scores() {
    let pred = model().predict_text("heap compaction pause in the jit tier").unwrap();
    assert_eq!(pred.labels, ["alice", "bob", "carol"]);
    let probabilities = [0.31690346177112966, 0.33364169991170933, 0.3494548383171611];
    let nps = [0.0, 0.5142098404628095, 1.0];
    for (got, want) in pred.probabilities.iter().zip(probabilities) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    for (got, want) in pred.nps.iter().zip(nps) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}
