//! Interaction-based ranker.
//!
//! A developer's interaction score sums, over every similar past issue and
//! every interaction they had with it, `similarity · points(kind) · e^(-λ·t)`
//! where `t` is the age of the interaction in whole days. Only active
//! developers are scored. Scores are min-max normalized afterwards.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BugReport, InteractionKind};

#[derive(Debug, Error, PartialEq)]
pub enum IbrError {
    #[error("interaction point {name} = {value} outside [0, 2]")]
    PointOutOfRange { name: &'static str, value: f64 },
    #[error("similarity threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("decay rate {0} is negative (only allowed in ablation mode) or not finite")]
    Decay(f64),
    #[error("interaction weight {0} outside [0, 1]")]
    Weight(f64),
}

/// Points awarded per interaction kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionPoints {
    pub assignment: f64,
    pub commit_or_pr: f64,
    pub discussion: f64,
}

impl Default for InteractionPoints {
    fn default() -> Self {
        Self {
            assignment: 0.5,
            commit_or_pr: 1.5,
            discussion: 0.2,
        }
    }
}

impl InteractionPoints {
    pub fn points(&self, kind: InteractionKind) -> f64 {
        match kind {
            InteractionKind::Assignment => self.assignment,
            InteractionKind::CommitOrPr => self.commit_or_pr,
            InteractionKind::Discussion => self.discussion,
        }
    }

    pub fn validate(&self) -> Result<(), IbrError> {
        for (name, value) in [
            ("assignment", self.assignment),
            ("commit_or_pr", self.commit_or_pr),
            ("discussion", self.discussion),
        ] {
            if !(0.0..=2.0).contains(&value) {
                return Err(IbrError::PointOutOfRange { name, value });
            }
        }
        Ok(())
    }
}

pub fn decay(days: f64, lambda: f64) -> f64 {
    (-lambda * days).exp()
}

/// Whole days from `at` until `now`, or `None` if `at` lies in the future.
pub fn elapsed_days(at: DateTime<Utc>, now: DateTime<Utc>) -> Option<i64> {
    let secs = (now - at).num_seconds();
    (secs >= 0).then(|| secs / 86_400)
}

/// Raw interaction scores over the active developer set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InteractionScores(pub BTreeMap<String, f64>);

impl InteractionScores {
    pub fn get(&self, dev: &str) -> f64 {
        self.0.get(dev).copied().unwrap_or(0.0)
    }

    pub fn any_positive(&self) -> bool {
        self.0.values().any(|v| *v > 0.0)
    }
}

/// One retrieved past issue together with its similarity to the new issue.
#[derive(Debug, Clone, Copy)]
pub struct SimilarIssue<'a> {
    pub report: &'a BugReport,
    pub similarity: f64,
}

/// Decayed, similarity-weighted interaction mass per developer, split by
/// interaction kind (assignment, commit or PR, discussion).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KindTotals(pub BTreeMap<String, [f64; 3]>);

fn kind_slot(kind: InteractionKind) -> usize {
    match kind {
        InteractionKind::Assignment => 0,
        InteractionKind::CommitOrPr => 1,
        InteractionKind::Discussion => 2,
    }
}

/// `points · totals`, in a fixed summation order.
#[inline]
pub fn combine(points: &InteractionPoints, t: &[f64; 3]) -> f64 {
    points.assignment * t[0] + points.commit_or_pr * t[1] + points.discussion * t[2]
}

/// Developers outside `active` are ignored, as are events after `now`
/// (they have not happened yet from the point of view of the new issue).
pub fn kind_totals(
    similar: &[SimilarIssue<'_>],
    lambda: f64,
    active: &BTreeSet<String>,
    now: DateTime<Utc>,
) -> KindTotals {
    let mut totals: BTreeMap<String, [f64; 3]> = active.iter().map(|d| (d.clone(), [0.0; 3])).collect();
    for s in similar {
        for e in &s.report.events {
            let Some(days) = elapsed_days(e.occurred_at, now) else {
                continue;
            };
            if let Some(t) = totals.get_mut(&e.actor) {
                t[kind_slot(e.kind)] += s.similarity * decay(days as f64, lambda);
            }
        }
    }
    KindTotals(totals)
}

impl KindTotals {
    pub fn scores(&self, points: &InteractionPoints) -> InteractionScores {
        InteractionScores(self.0.iter().map(|(d, t)| (d.clone(), combine(points, t))).collect())
    }
}

/// Similarity-, type- and recency-weighted interaction scores over `active`.
pub fn interaction_scores(
    similar: &[SimilarIssue<'_>],
    points: &InteractionPoints,
    lambda: f64,
    active: &BTreeSet<String>,
    now: DateTime<Utc>,
) -> InteractionScores {
    kind_totals(similar, lambda, active, now).scores(points)
}

/// Min-max scaling of interaction scores. All zeros stay zeros; a constant
/// non-zero vector maps to all ones.
pub fn normalize_scores(scores: &InteractionScores) -> BTreeMap<String, f64> {
    if !scores.any_positive() {
        return scores.0.keys().map(|d| (d.clone(), 0.0)).collect();
    }
    let min = scores.0.values().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.0.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    scores
        .0
        .iter()
        .map(|(d, v)| {
            let n = if max > min { (v - min) / (max - min) } else { 1.0 };
            (d.clone(), n)
        })
        .collect()
}
