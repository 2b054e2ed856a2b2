//! Exhaustive grid search over the interaction and fusion parameters.
//!
//! Grid points are numbered in mixed radix with τ most significant and W_f
//! least significant, so numeric order of the index is lexicographic order of
//! the parameter tuple. The best point is the one with the highest objective,
//! ties going to the smallest tuple.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::BugReport;
use crate::hybrid::{HybridParams, PreparedQuery};
use crate::ibr::{self, InteractionPoints};

#[derive(Debug, Error, PartialEq)]
pub enum TuneError {
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("validation issue {0} has no ground-truth label")]
    MissingTruth(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("enumeration order is not a permutation of the grid")]
    BadOrder,
}

/// Inclusive range `lo, lo + step, …, hi`. Values are computed as an integer
/// count of steps over a power-of-ten denominator so that e.g. 0.35 is the
/// nearest double to 0.35 rather than an accumulated sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Units {
    lo: i64,
    step: i64,
    denom: f64,
    count: usize,
}

fn integral(x: f64) -> Option<i64> {
    let r = x.round();
    ((x - r).abs() < 1e-6).then_some(r as i64)
}

impl Axis {
    pub const fn new(lo: f64, hi: f64, step: f64) -> Self {
        Self { lo, hi, step }
    }

    pub const fn single(v: f64) -> Self {
        Self { lo: v, hi: v, step: 1.0 }
    }

    fn units(&self) -> Result<Units, TuneError> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.step.is_finite()) || self.step <= 0.0 || self.hi < self.lo {
            return Err(TuneError::Grid(format!("bad axis {self:?}")));
        }
        for d in 0..10 {
            let denom = 10f64.powi(d);
            if let (Some(lo), Some(hi), Some(step)) = (
                integral(self.lo * denom),
                integral(self.hi * denom),
                integral(self.step * denom),
            ) {
                if step == 0 || (hi - lo) % step != 0 {
                    continue;
                }
                return Ok(Units {
                    lo,
                    step,
                    denom,
                    count: ((hi - lo) / step) as usize + 1,
                });
            }
        }
        Err(TuneError::Grid(format!("axis {self:?} is not a whole number of decimal steps")))
    }

    pub fn count(&self) -> Result<usize, TuneError> {
        Ok(self.units()?.count)
    }

    pub fn values(&self) -> Result<Vec<f64>, TuneError> {
        let u = self.units()?;
        Ok((0..u.count as i64).map(|i| (u.lo + i * u.step) as f64 / u.denom).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParamGrid {
    pub tau: Axis,
    pub lambda: Axis,
    pub ip_assignment: Axis,
    pub ip_commit_or_pr: Axis,
    pub ip_discussion: Axis,
    pub wf: Axis,
    /// The objective is Top-`top_k` accuracy.
    pub top_k: usize,
}

impl Default for HyperParamGrid {
    fn default() -> Self {
        Self::standard()
    }
}

/// Axis values for a grid, in enumeration order.
#[derive(Debug, Clone, PartialEq)]
pub struct GridValues {
    pub axes: [Vec<f64>; 6],
}

impl GridValues {
    pub fn cardinality(&self) -> u64 {
        self.axes.iter().map(|a| a.len() as u64).product()
    }

    pub fn point(&self, mut index: u64) -> HybridParams {
        let mut v = [0.0; 6];
        for d in (0..6).rev() {
            let n = self.axes[d].len() as u64;
            v[d] = self.axes[d][(index % n) as usize];
            index /= n;
        }
        HybridParams {
            tau: v[0],
            lambda: v[1],
            points: InteractionPoints {
                assignment: v[2],
                commit_or_pr: v[3],
                discussion: v[4],
            },
            wf: v[5],
            allow_negative_lambda: false,
        }
    }
}

impl HyperParamGrid {
    /// τ ∈ [0.2, 0.8] by 0.05, λ ∈ [0.001, 0.01] by 0.001, each interaction
    /// point ∈ [0, 2] by 0.1, W_f ∈ {0.05, …, 0.95}; Top-1 objective.
    pub fn standard() -> Self {
        Self {
            tau: Axis::new(0.2, 0.8, 0.05),
            lambda: Axis::new(0.001, 0.01, 0.001),
            ip_assignment: Axis::new(0.0, 2.0, 0.1),
            ip_commit_or_pr: Axis::new(0.0, 2.0, 0.1),
            ip_discussion: Axis::new(0.0, 2.0, 0.1),
            wf: Axis::new(0.05, 0.95, 0.05),
            top_k: 1,
        }
    }

    pub fn singleton(p: &HybridParams, top_k: usize) -> Self {
        Self {
            tau: Axis::single(p.tau),
            lambda: Axis::single(p.lambda),
            ip_assignment: Axis::single(p.points.assignment),
            ip_commit_or_pr: Axis::single(p.points.commit_or_pr),
            ip_discussion: Axis::single(p.points.discussion),
            wf: Axis::single(p.wf),
            top_k,
        }
    }

    /// Sweeps τ, λ and W_f with the interaction points held at `points`.
    pub fn coordinate_subset(&self, points: &InteractionPoints) -> Self {
        Self {
            ip_assignment: Axis::single(points.assignment),
            ip_commit_or_pr: Axis::single(points.commit_or_pr),
            ip_discussion: Axis::single(points.discussion),
            ..self.clone()
        }
    }

    pub fn values(&self) -> Result<GridValues, TuneError> {
        if self.top_k == 0 {
            return Err(TuneError::Grid("top_k must be at least 1".into()));
        }
        let axes = [
            self.tau.values()?,
            self.lambda.values()?,
            self.ip_assignment.values()?,
            self.ip_commit_or_pr.values()?,
            self.ip_discussion.values()?,
            self.wf.values()?,
        ];
        let bounds = [(0.0, 1.0), (0.0, f64::INFINITY), (0.0, 2.0), (0.0, 2.0), (0.0, 2.0), (0.0, 1.0)];
        for (a, (lo, hi)) in axes.iter().zip(bounds) {
            if a.iter().any(|v| *v < lo || *v > hi) {
                return Err(TuneError::Grid(format!("axis values {a:?} outside [{lo}, {hi}]")));
            }
        }
        Ok(GridValues { axes })
    }

    pub fn cardinality(&self) -> Result<u64, TuneError> {
        Ok(self.values()?.cardinality())
    }
}

/// Result of a search: the objective (hit count) for every grid point,
/// indexed like [`GridValues::point`].
#[derive(Debug, Clone, PartialEq)]
pub struct TuneReport {
    pub grid: GridValues,
    pub top_k: usize,
    pub n_queries: usize,
    pub hits: Vec<u32>,
    pub best_index: u64,
}

impl TuneReport {
    pub fn best(&self) -> HybridParams {
        self.grid.point(self.best_index)
    }

    pub fn best_score(&self) -> f64 {
        self.score(self.best_index)
    }

    pub fn score(&self, index: u64) -> f64 {
        self.hits[index as usize] as f64 / self.n_queries as f64
    }

    pub fn table(&self) -> impl Iterator<Item = (HybridParams, f64)> + '_ {
        (0..self.hits.len() as u64).map(|i| (self.grid.point(i), self.score(i)))
    }
}

fn check_queries(queries: &[PreparedQuery]) -> Result<(), TuneError> {
    if queries.is_empty() {
        return Err(TuneError::EmptyValidation);
    }
    match queries.iter().find(|q| q.truth.is_none()) {
        Some(q) => Err(TuneError::MissingTruth(q.id.clone())),
        None => Ok(()),
    }
}

/// Number of queries whose true label is in the first `k` of the fused
/// ranking under `params`.
pub fn evaluate_point(params: &HybridParams, queries: &[PreparedQuery], history: &[BugReport], k: usize) -> u32 {
    queries
        .iter()
        .filter(|q| {
            let truth = q.truth.as_deref();
            q.rank(history, params).iter().take(k).any(|c| Some(c.developer.as_str()) == truth)
        })
        .count() as u32
}

fn argmax(hits: &[u32], order: impl Iterator<Item = u64>) -> u64 {
    let mut best: Option<u64> = None;
    for i in order {
        best = match best {
            Some(b) if hits[b as usize] > hits[i as usize] || (hits[b as usize] == hits[i as usize] && b < i) => Some(b),
            _ => Some(i),
        };
    }
    best.expect("grid is non-empty")
}

/// Evaluates every point, one at a time, in the given order.
pub fn grid_search_in_order(
    grid: &HyperParamGrid,
    queries: &[PreparedQuery],
    history: &[BugReport],
    order: &[u64],
) -> Result<TuneReport, TuneError> {
    check_queries(queries)?;
    let values = grid.values()?;
    let n = values.cardinality();
    let mut seen = vec![false; n as usize];
    if order.len() as u64 != n {
        return Err(TuneError::BadOrder);
    }
    for &i in order {
        if i >= n || std::mem::replace(&mut seen[i as usize], true) {
            return Err(TuneError::BadOrder);
        }
    }
    let scored = crate::par_map(order, |&i| evaluate_point(&values.point(i), queries, history, grid.top_k));
    let mut hits = vec![0u32; n as usize];
    for (&i, h) in order.iter().zip(scored) {
        hits[i as usize] = h;
    }
    let best_index = argmax(&hits, order.iter().copied());
    Ok(TuneReport {
        grid: values,
        top_k: grid.top_k,
        n_queries: queries.len(),
        hits,
        best_index,
    })
}

struct QueryBlock {
    nps: Vec<f64>,
    ids: Vec<String>,
    truth: Option<usize>,
    totals: Vec<[f64; 3]>,
}

/// Rank of the truth among candidates by (FS desc, NPS desc, id asc), the
/// same order the aggregator sorts by.
fn truth_rank(b: &QueryBlock, nis: &[f64], wf: f64, t: usize) -> usize {
    let fs_t = b.nps[t] + wf * nis[t];
    (0..b.nps.len())
        .filter(|&c| {
            if c == t {
                return false;
            }
            let fs_c = b.nps[c] + wf * nis[c];
            fs_c.total_cmp(&fs_t)
                .then(b.nps[c].total_cmp(&b.nps[t]))
                .then_with(|| b.ids[t].cmp(&b.ids[c]))
                .is_gt()
        })
        .count()
}

fn normalize(is: &[f64], out: &mut [f64]) {
    if !is.iter().any(|v| *v > 0.0) {
        out.fill(0.0);
        return;
    }
    let min = is.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = is.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for (o, v) in out.iter_mut().zip(is) {
        *o = if max > min { (v - min) / (max - min) } else { 1.0 };
    }
}

/// Full search. Work that depends only on (τ, λ) is shared across the inner
/// axes; the arithmetic per point is identical to [`evaluate_point`].
pub fn grid_search(grid: &HyperParamGrid, queries: &[PreparedQuery], history: &[BugReport]) -> Result<TuneReport, TuneError> {
    check_queries(queries)?;
    let values = grid.values()?;
    let [taus, lambdas, ipa, ipc, ipd, wfs] = &values.axes;
    let outer: Vec<(f64, f64)> = taus.iter().flat_map(|&t| lambdas.iter().map(move |&l| (t, l))).collect();
    let k = grid.top_k;

    let blocks = crate::par_map(&outer, |&(tau, lambda)| {
        let qb: Vec<QueryBlock> = queries
            .iter()
            .map(|q| {
                let totals = q.kind_totals(history, tau, lambda);
                let ids: Vec<String> = q.nps.keys().cloned().collect();
                QueryBlock {
                    nps: q.nps.values().copied().collect(),
                    truth: ids.iter().position(|d| Some(d) == q.truth.as_ref()),
                    totals: ids.iter().map(|d| totals.0[d]).collect(),
                    ids,
                }
            })
            .collect();
        let mut out = Vec::with_capacity(ipa.len() * ipc.len() * ipd.len() * wfs.len());
        let mut is = Vec::new();
        let mut nis: Vec<Vec<f64>> = qb.iter().map(|b| vec![0.0; b.nps.len()]).collect();
        for &a in ipa {
            for &c in ipc {
                for &d in ipd {
                    let points = InteractionPoints {
                        assignment: a,
                        commit_or_pr: c,
                        discussion: d,
                    };
                    for (b, n) in qb.iter().zip(nis.iter_mut()) {
                        is.clear();
                        is.extend(b.totals.iter().map(|t| ibr::combine(&points, t)));
                        normalize(&is, n);
                    }
                    for &wf in wfs {
                        let h = qb
                            .iter()
                            .zip(&nis)
                            .filter(|(b, n)| b.truth.is_some_and(|t| truth_rank(b, n, wf, t) < k))
                            .count();
                        out.push(h as u32);
                    }
                }
            }
        }
        out
    });
    let hits: Vec<u32> = blocks.into_iter().flatten().collect();
    let best_index = argmax(&hits, 0..hits.len() as u64);
    Ok(TuneReport {
        grid: values,
        top_k: k,
        n_queries: queries.len(),
        hits,
        best_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{InteractionEvent, InteractionKind};
    use crate::simindex::Hit;
    use chrono::{Duration, TimeZone, Utc};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    #[test]
    fn standard_cardinality() {
        let g = HyperParamGrid::standard();
        assert_eq!(g.tau.count().unwrap(), 13);
        assert_eq!(g.lambda.count().unwrap(), 10);
        assert_eq!(g.ip_assignment.count().unwrap(), 21);
        assert_eq!(g.wf.count().unwrap(), 19);
        assert_eq!(g.cardinality().unwrap(), 22_874_670);
    }

    #[test]
    fn axis_values_are_clean() {
        let v = Axis::new(0.2, 0.8, 0.05).values().unwrap();
        assert_eq!(v[3], 0.35);
        assert_eq!(*v.last().unwrap(), 0.8);
        let w = Axis::new(0.05, 0.95, 0.05).values().unwrap();
        assert_eq!((w[0], w[18]), (0.05, 0.95));
        assert!(Axis::new(0.0, 1.0, 0.3).count().is_err());
        assert!(Axis::new(1.0, 0.0, 0.1).count().is_err());
    }

    #[test]
    fn index_order_is_lexicographic() {
        let g = HyperParamGrid {
            tau: Axis::new(0.2, 0.3, 0.05),
            lambda: Axis::new(0.001, 0.002, 0.001),
            ip_assignment: Axis::new(0.0, 0.1, 0.1),
            ip_commit_or_pr: Axis::single(1.0),
            ip_discussion: Axis::new(0.0, 0.2, 0.1),
            wf: Axis::new(0.1, 0.3, 0.1),
            top_k: 1,
        };
        let v = g.values().unwrap();
        let pts: Vec<[f64; 6]> = (0..v.cardinality()).map(|i| v.point(i).tuple()).collect();
        for w in pts.windows(2) {
            assert!(w[0].partial_cmp(&w[1]) == Some(std::cmp::Ordering::Less));
        }
    }

    fn now() -> chrono::DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 3, 1, 0, 0, 0).unwrap()
    }

    /// Random queries over a random history.
    fn fixture(seed: u64) -> (Vec<PreparedQuery>, Vec<BugReport>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let devs = ["a", "b", "c", "d"];
        let kinds = [InteractionKind::Assignment, InteractionKind::CommitOrPr, InteractionKind::Discussion];
        let history: Vec<BugReport> = (0..8)
            .map(|i| BugReport {
                id: format!("h{i}"),
                title: String::new(),
                description: String::new(),
                created_at: now() - Duration::days(200),
                owner: None,
                components: vec![],
                events: (0..rng.gen_range(0..5))
                    .map(|_| InteractionEvent {
                        actor: devs[rng.gen_range(0..4)].into(),
                        kind: kinds[rng.gen_range(0..3)],
                        occurred_at: now() - Duration::days(rng.gen_range(0..150)),
                    })
                    .collect(),
            })
            .collect();
        let queries = (0..6)
            .map(|q| {
                let nps: BTreeMap<String, f64> = devs.iter().map(|d| (d.to_string(), (rng.gen_range(0..5) as f64) / 4.0)).collect();
                let mut hits = Vec::new();
                for p in 0..8 {
                    if rng.gen_bool(0.5) {
                        hits.push(Hit {
                            id: format!("h{p}"),
                            position: p,
                            similarity: rng.gen_range(0.2..1.0),
                        });
                    }
                }
                PreparedQuery::new(&format!("q{q}"), Some(devs[rng.gen_range(0..4)].into()), now(), nps, &hits, &history)
            })
            .collect();
        (queries, history)
    }

    fn small_grid() -> HyperParamGrid {
        HyperParamGrid {
            tau: Axis::new(0.2, 0.6, 0.2),
            lambda: Axis::new(0.001, 0.01, 0.009),
            ip_assignment: Axis::new(0.0, 2.0, 1.0),
            ip_commit_or_pr: Axis::new(0.0, 2.0, 1.0),
            ip_discussion: Axis::new(0.0, 1.0, 1.0),
            wf: Axis::new(0.05, 0.95, 0.3),
            top_k: 1,
        }
    }

    #[test]
    fn blocked_search_matches_pointwise_and_shuffled() {
        for seed in 0..5 {
            let (queries, history) = fixture(seed);
            let g = small_grid();
            let fast = grid_search(&g, &queries, &history).unwrap();
            let n = g.cardinality().unwrap();
            let mut order: Vec<u64> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 100));
            let slow = grid_search_in_order(&g, &queries, &history, &order).unwrap();
            assert_eq!(fast.hits, slow.hits);
            assert_eq!(fast.best_index, slow.best_index);
            assert_eq!(fast.best_score(), fast.table().map(|(_, s)| s).fold(0.0, f64::max));
        }
    }

    #[test]
    fn singleton_grid_returns_its_point() {
        let (queries, history) = fixture(3);
        let p = HybridParams::default();
        let r = grid_search(&HyperParamGrid::singleton(&p, 1), &queries, &history).unwrap();
        assert_eq!(r.best().tuple(), p.tuple());
        assert_eq!(r.hits[0], evaluate_point(&p, &queries, &history, 1));
    }

    #[test]
    fn planted_weight_wins() {
        // content prefers a; a recent commit by b on a near-duplicate makes
        // b correct once the interaction weight is large enough
        let history = vec![BugReport {
            id: "dup".into(),
            title: String::new(),
            description: String::new(),
            created_at: now() - Duration::days(3),
            owner: Some("b".into()),
            components: vec![],
            events: vec![InteractionEvent {
                actor: "b".into(),
                kind: InteractionKind::CommitOrPr,
                occurred_at: now() - Duration::days(1),
            }],
        }];
        let nps: BTreeMap<String, f64> = [("a".to_string(), 1.0), ("b".to_string(), 0.7)].into();
        let hits = [Hit {
            id: "dup".into(),
            position: 0,
            similarity: 0.9,
        }];
        let q = PreparedQuery::new("q", Some("b".into()), now(), nps, &hits, &history);
        let p = HybridParams::default();
        let mut g = HyperParamGrid::singleton(&p, 1);
        g.wf = Axis::new(0.2, 0.4, 0.2);
        let r = grid_search(&g, &[q], &history).unwrap();
        assert_eq!(r.hits, vec![0, 1]);
        assert_eq!(r.best().wf, 0.4);
    }

    #[test]
    fn ties_go_to_smallest_tuple() {
        let (queries, history) = fixture(1);
        let mut g = small_grid();
        g.tau = Axis::single(1.0);
        g.lambda = Axis::single(0.001);
        let r = grid_search(&g, &queries, &history).unwrap();
        // with no interactions every point scores the same
        assert!(r.hits.iter().all(|h| *h == r.hits[0]));
        assert_eq!(r.best_index, 0);
    }

    #[test]
    fn errors() {
        let g = small_grid();
        assert_eq!(grid_search(&g, &[], &[]).unwrap_err(), TuneError::EmptyValidation);
        let (mut queries, history) = fixture(0);
        assert_eq!(grid_search_in_order(&g, &queries, &history, &[0]).unwrap_err(), TuneError::BadOrder);
        queries[0].truth = None;
        assert!(matches!(grid_search(&g, &queries, &history), Err(TuneError::MissingTruth(_))));
    }
}
