//! Browser bindings. Each export takes and returns JSON strings so the
//! page needs nothing beyond the generated glue.
//!
//! * [`decay_curve`]: how fast old interactions fade for a given λ.
//! * [`rerank`]: weighted rank aggregation (and Borda) over hand-edited scores.
//! * [`explore`]: retrieve similar issues from a small history and show
//!   the interaction scores they produce.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use triage_core::aggregator::{self, CandidateScore};
use triage_core::corpus::{normalize_text, BugReport};
use triage_core::ibr::{self, InteractionPoints, SimilarIssue};
use triage_core::simindex::{build_index, ReferenceProvider};
use wasm_bindgen::prelude::*;

/// `(day, weight)` pairs for day = 0, step, 2·step, ... up to `max_days`.
pub fn decay_points(lambda: f64, max_days: u32, step: u32) -> Result<Vec<(u32, f64)>, String> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(format!("λ must be a non-negative number, got {lambda}"));
    }
    let step = step.max(1);
    Ok((0..=max_days).step_by(step as usize).map(|d| (d, ibr::decay(d as f64, lambda))).collect())
}

#[derive(Debug, Deserialize)]
pub struct RerankInput {
    pub nps: BTreeMap<String, f64>,
    pub nis: BTreeMap<String, f64>,
    pub wf: f64,
}

#[derive(Debug, Serialize)]
pub struct RerankOutput {
    pub wra: Vec<CandidateScore>,
    pub borda: Vec<(String, usize)>,
}

fn ranked(scores: &BTreeMap<String, f64>) -> Vec<String> {
    let mut v: Vec<(&String, f64)> = scores.iter().map(|(d, s)| (d, *s)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    v.into_iter().map(|(d, _)| d.clone()).collect()
}

pub fn rerank_json(input: &str) -> Result<String, String> {
    let r: RerankInput = serde_json::from_str(input).map_err(|e| e.to_string())?;
    let wra = aggregator::wra(&r.nps, &r.nis, r.wf).map_err(|e| e.to_string())?;
    let borda = aggregator::borda(&ranked(&r.nps), &ranked(&r.nis)).map_err(|e| e.to_string())?;
    serde_json::to_string(&RerankOutput { wra, borda }).map_err(|e| e.to_string())
}

fn default_dim() -> usize {
    256
}

#[derive(Debug, Deserialize)]
pub struct ExploreInput {
    pub history: Vec<BugReport>,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub description: String,
    pub tau: f64,
    pub lambda: f64,
    #[serde(default)]
    pub points: InteractionPoints,
    pub now: DateTime<Utc>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct ExploreHit {
    pub id: String,
    pub similarity: f64,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct ExploreDeveloper {
    pub id: String,
    /// Decayed, similarity-weighted mass per kind: assignment, commit or PR, discussion.
    pub totals: [f64; 3],
    pub is: f64,
    pub nis: f64,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct ExploreOutput {
    pub hits: Vec<ExploreHit>,
    pub developers: Vec<ExploreDeveloper>,
}

/// Everyone who owns or touched an issue in the history is a candidate.
pub fn explore(input: &ExploreInput) -> Result<ExploreOutput, String> {
    input.points.validate().map_err(|e| e.to_string())?;
    if !input.lambda.is_finite() || input.lambda < 0.0 {
        return Err(format!("λ must be a non-negative number, got {}", input.lambda));
    }
    let text = normalize_text(&format!("{} {}", input.title, input.description));
    if text.is_empty() {
        return Err("query is empty after normalization".into());
    }
    let provider = ReferenceProvider::new(input.dim, input.seed);
    let index = build_index(&input.history, &provider).map_err(|e| e.to_string())?;
    let q = index.embed_query(&provider, &text).map_err(|e| e.to_string())?;
    let hits: Vec<_> = index
        .retrieve(&q, input.tau)
        .map_err(|e| e.to_string())?
        .into_iter()
        .filter(|h| input.history[h.position].created_at <= input.now)
        .collect();
    let similar: Vec<SimilarIssue<'_>> = hits
        .iter()
        .map(|h| SimilarIssue {
            report: &input.history[h.position],
            similarity: h.similarity,
        })
        .collect();
    let mut active = BTreeSet::new();
    for r in &input.history {
        active.extend(r.owner.iter().cloned());
        active.extend(r.events.iter().map(|e| e.actor.clone()));
    }
    let totals = ibr::kind_totals(&similar, input.lambda, &active, input.now);
    let scores = totals.scores(&input.points);
    let nis = ibr::normalize_scores(&scores);
    let mut developers: Vec<ExploreDeveloper> = totals
        .0
        .iter()
        .map(|(d, t)| ExploreDeveloper {
            id: d.clone(),
            totals: *t,
            is: scores.0[d],
            nis: nis[d],
        })
        .collect();
    developers.sort_by(|a, b| b.is.total_cmp(&a.is).then_with(|| a.id.cmp(&b.id)));
    Ok(ExploreOutput {
        hits: hits
            .into_iter()
            .map(|h| ExploreHit {
                id: h.id,
                similarity: h.similarity,
            })
            .collect(),
        developers,
    })
}

pub fn explore_json(input: &str) -> Result<String, String> {
    let parsed: ExploreInput = serde_json::from_str(input).map_err(|e| e.to_string())?;
    serde_json::to_string(&explore(&parsed)?).map_err(|e| e.to_string())
}

/// JSON array of `[day, weight]` pairs.
#[wasm_bindgen]
pub fn decay_curve(lambda: f64, max_days: u32, step: u32) -> Result<String, JsError> {
    let pts = decay_points(lambda, max_days, step).map_err(|e| JsError::new(&e))?;
    Ok(serde_json::to_string(&pts).expect("plain numbers"))
}

/// `{nps, nis, wf}` in, `{wra, borda}` out.
#[wasm_bindgen]
pub fn rerank(input: &str) -> Result<String, JsError> {
    rerank_json(input).map_err(|e| JsError::new(&e))
}

/// `{history, title, description, tau, lambda, points, now}` in,
/// `{hits, developers}` out.
#[wasm_bindgen(js_name = exploreInteractions)]
pub fn explore_interactions(input: &str) -> Result<String, JsError> {
    explore_json(input).map_err(|e| JsError::new(&e))
}
