//! Top-k accuracy, per-class accuracy, orthogonality and a paired
//! Wilcoxon signed-rank test.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

pub const REPORT_KS: [usize; 5] = [1, 3, 5, 10, 20];

/// Below this many non-zero differences the signed-rank p-value is exact.
pub const EXACT_LIMIT: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
}

pub fn hit_at(ranking: &[String], truth: &str, k: usize) -> bool {
    ranking.iter().take(k).any(|r| r == truth)
}

pub fn topk_accuracy(predictions: &[Vec<String>], truth: &[String], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if predictions.len() != truth.len() {
        return Err(EvalError::Length(predictions.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = predictions.iter().zip(truth).filter(|(p, t)| hit_at(p, t, k)).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Items each set alone contains.
pub fn orthogonality(correct: &[BTreeSet<String>]) -> Vec<usize> {
    (0..correct.len())
        .map(|i| {
            correct[i]
                .iter()
                .filter(|id| correct.iter().enumerate().all(|(j, s)| j == i || !s.contains(*id)))
                .count()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub p_value: f64,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Non-zero differences.
    pub n: usize,
    pub method: WilcoxonMethod,
    /// Every difference was zero; p is reported as 1.
    pub degenerate: bool,
}

/// Average ranks (1-based) of `abs`, which must be sorted ascending.
fn average_ranks(abs: &[f64]) -> Vec<f64> {
    let mut ranks = vec![0.0; abs.len()];
    let mut i = 0;
    while i < abs.len() {
        let mut j = i;
        while j + 1 < abs.len() && abs[j + 1] == abs[i] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        ranks[i..=j].fill(r);
        i = j + 1;
    }
    ranks
}

/// Two-sided signed-rank test on `a - b`. Zero differences are dropped and
/// tied magnitudes share their average rank.
pub fn wilcoxon_paired(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Length(a.len(), b.len()));
    }
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            p_value: 1.0,
            w_plus: 0.0,
            n: 0,
            method: WilcoxonMethod::Exact,
            degenerate: true,
        });
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();

    let (p_value, method) = if n < EXACT_LIMIT {
        (exact_p(&ranks, w_plus), WilcoxonMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut i = 0;
        while i < n {
            let t = ranks[i..].iter().take_while(|r| **r == ranks[i]).count() as f64;
            tie_term += t * t * t - t;
            i += t as usize;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let std = Normal::standard();
        ((2.0 * (1.0 - std.cdf(z))).min(1.0), WilcoxonMethod::Normal)
    };
    Ok(WilcoxonResult {
        p_value,
        w_plus,
        n,
        method,
        degenerate: false,
    })
}

/// Exact two-sided p-value. Doubled average ranks are integers, so the null
/// distribution of 2·W+ is a subset-sum count over 2^n equally likely signs.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w = (2.0 * w_plus).round() as usize;
    let all = 2f64.powi(ranks.len() as i32);
    let lower: u64 = counts[..=w].iter().sum();
    let upper: u64 = counts[w..].iter().sum();
    (2.0 * lower.min(upper) as f64 / all).min(1.0)
}

/// Accuracy figures for one ranker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub name: String,
    pub topk: BTreeMap<usize, f64>,
    /// Top-1 accuracy per true class, for classes with test samples.
    pub per_class_top1: BTreeMap<String, f64>,
    /// Hit indicator per sample per k.
    pub hits: BTreeMap<usize, Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub a: String,
    pub b: String,
    pub k: usize,
    pub test: WilcoxonResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sample_ids: Vec<String>,
    pub truth: Vec<String>,
    pub models: Vec<ModelEval>,
    /// Top-1 orthogonality per model name.
    pub orthogonality: BTreeMap<String, usize>,
    pub significance: Vec<Significance>,
}

impl EvalReport {
    pub fn model(&self, name: &str) -> Option<&ModelEval> {
        self.models.iter().find(|m| m.name == name)
    }

    /// `sample_id,model,k,hit` rows.
    pub fn hits_csv(&self) -> String {
        let mut out = String::from("sample_id,model,k,hit\n");
        for m in &self.models {
            for (k, hits) in &m.hits {
                for (id, h) in self.sample_ids.iter().zip(hits) {
                    out.push_str(&format!("{id},{},{k},{h}\n", m.name));
                }
            }
        }
        out
    }
}

pub fn evaluate_model(name: &str, rankings: &[Vec<String>], truth: &[String]) -> Result<ModelEval, EvalError> {
    let mut topk = BTreeMap::new();
    let mut hits = BTreeMap::new();
    for k in REPORT_KS {
        topk.insert(k, topk_accuracy(rankings, truth, k)?);
        hits.insert(k, rankings.iter().zip(truth).map(|(r, t)| hit_at(r, t, k) as u8).collect());
    }
    let mut per_class: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (r, t) in rankings.iter().zip(truth) {
        let e = per_class.entry(t.clone()).or_default();
        e.0 += hit_at(r, t, 1) as usize;
        e.1 += 1;
    }
    Ok(ModelEval {
        name: name.to_string(),
        topk,
        per_class_top1: per_class.into_iter().map(|(c, (h, n))| (c, h as f64 / n as f64)).collect(),
        hits,
    })
}

/// Evaluates named rankers on the same samples. Significance compares
/// `reference` against every other model at each reported k.
pub fn evaluate(
    sample_ids: &[String],
    truth: &[String],
    models: &[(String, Vec<Vec<String>>)],
    reference: &str,
) -> Result<EvalReport, EvalError> {
    if sample_ids.len() != truth.len() {
        return Err(EvalError::Length(sample_ids.len(), truth.len()));
    }
    let evals: Vec<ModelEval> = models
        .iter()
        .map(|(name, r)| evaluate_model(name, r, truth))
        .collect::<Result<_, _>>()?;
    let correct: Vec<BTreeSet<String>> = evals
        .iter()
        .map(|m| sample_ids.iter().zip(&m.hits[&1]).filter(|(_, h)| **h == 1).map(|(id, _)| id.clone()).collect())
        .collect();
    let orthogonality = evals.iter().map(|m| m.name.clone()).zip(orthogonality(&correct)).collect();
    let mut significance = Vec::new();
    if let Some(r) = evals.iter().find(|m| m.name == reference) {
        for other in evals.iter().filter(|m| m.name != reference) {
            for k in REPORT_KS {
                let a: Vec<f64> = r.hits[&k].iter().map(|h| *h as f64).collect();
                let b: Vec<f64> = other.hits[&k].iter().map(|h| *h as f64).collect();
                significance.push(Significance {
                    a: r.name.clone(),
                    b: other.name.clone(),
                    k,
                    test: wilcoxon_paired(&a, &b)?,
                });
            }
        }
    }
    Ok(EvalReport {
        sample_ids: sample_ids.to_vec(),
        truth: truth.to_vec(),
        models: evals,
        orthogonality,
        significance,
    })
}
