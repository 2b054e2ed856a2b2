//! Ranking a single issue with both rankers and fusing the result.
//!
//! A [`PreparedQuery`] caches everything that does not depend on the
//! interaction parameters (content scores and the candidate similar issues at
//! the loosest threshold) so that many parameter settings can be scored
//! cheaply.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::aggregator::{self, CandidateScore};
use crate::corpus::BugReport;
use crate::ibr::{self, IbrError, InteractionPoints, KindTotals, SimilarIssue};
use crate::simindex::Hit;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HybridParams {
    pub tau: f64,
    pub lambda: f64,
    pub points: InteractionPoints,
    pub wf: f64,
    /// Accept λ < 0 (older interactions weigh more). Ablation studies only.
    pub allow_negative_lambda: bool,
}

impl Default for HybridParams {
    fn default() -> Self {
        Self {
            tau: 0.4,
            lambda: 0.01,
            points: InteractionPoints::default(),
            wf: 0.65,
            allow_negative_lambda: false,
        }
    }
}

impl HybridParams {
    pub fn validate(&self) -> Result<(), IbrError> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(IbrError::Threshold(self.tau));
        }
        if !self.lambda.is_finite() || (self.lambda < 0.0 && !self.allow_negative_lambda) {
            return Err(IbrError::Decay(self.lambda));
        }
        if !(0.0..=1.0).contains(&self.wf) {
            return Err(IbrError::Weight(self.wf));
        }
        self.points.validate()
    }

    /// (τ, λ, IP_a, IP_c, IP_d, W_f), the order used for tie-breaking.
    pub fn tuple(&self) -> [f64; 6] {
        [
            self.tau,
            self.lambda,
            self.points.assignment,
            self.points.commit_or_pr,
            self.points.discussion,
            self.wf,
        ]
    }
}

/// One issue to rank, with parameter-independent parts precomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedQuery {
    pub id: String,
    /// Ground-truth label, if known.
    pub truth: Option<String>,
    pub now: DateTime<Utc>,
    /// Content score per label.
    pub nps: BTreeMap<String, f64>,
    /// (history position, similarity), most similar first.
    pub hits: Vec<(usize, f64)>,
}

impl PreparedQuery {
    /// Keeps hits that exist at `now` and are not the query itself.
    pub fn new(
        id: &str,
        truth: Option<String>,
        now: DateTime<Utc>,
        nps: BTreeMap<String, f64>,
        hits: &[Hit],
        history: &[BugReport],
    ) -> Self {
        let hits = hits
            .iter()
            .filter(|h| h.id != id && history[h.position].created_at <= now)
            .map(|h| (h.position, h.similarity))
            .collect();
        Self {
            id: id.to_string(),
            truth,
            now,
            nps,
            hits,
        }
    }

    pub fn similar<'a>(&self, history: &'a [BugReport], tau: f64) -> Vec<SimilarIssue<'a>> {
        self.hits
            .iter()
            .filter(|(_, s)| *s >= tau)
            .map(|&(p, similarity)| SimilarIssue {
                report: &history[p],
                similarity,
            })
            .collect()
    }

    pub fn candidates(&self) -> BTreeSet<String> {
        self.nps.keys().cloned().collect()
    }

    pub fn kind_totals(&self, history: &[BugReport], tau: f64, lambda: f64) -> KindTotals {
        ibr::kind_totals(&self.similar(history, tau), lambda, &self.candidates(), self.now)
    }

    /// Normalized interaction score per candidate.
    pub fn nis(&self, history: &[BugReport], params: &HybridParams) -> BTreeMap<String, f64> {
        let scores = self.kind_totals(history, params.tau, params.lambda).scores(&params.points);
        ibr::normalize_scores(&scores)
    }

    /// Fused ranking of every candidate.
    pub fn rank(&self, history: &[BugReport], params: &HybridParams) -> Vec<CandidateScore> {
        let nis = self.nis(history, params);
        aggregator::wra(&self.nps, &nis, params.wf).expect("candidate sets share keys by construction")
    }
}
