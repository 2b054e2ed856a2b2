//! Rank aggregation: weighted score fusion and a Borda-count baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("candidate sets differ: {0:?} present in only one ranking")]
    Misaligned(Vec<String>),
    #[error("interaction weight {0} outside [0, 1]")]
    Weight(f64),
    #[error("ranking contains duplicate candidate {0}")]
    Duplicate(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub developer: String,
    pub fs: f64,
    pub nps: f64,
    pub nis: f64,
}

fn check_aligned<A, B>(a: &BTreeMap<String, A>, b: &BTreeMap<String, B>) -> Result<(), AggregateError> {
    let mut only: Vec<String> = a.keys().filter(|k| !b.contains_key(*k)).cloned().collect();
    only.extend(b.keys().filter(|k| !a.contains_key(*k)).cloned());
    if only.is_empty() {
        Ok(())
    } else {
        only.sort();
        Err(AggregateError::Misaligned(only))
    }
}

/// `FS = NPS + w_f · NIS`, sorted by FS, then NPS (both descending), then id.
pub fn wra(
    nps: &BTreeMap<String, f64>,
    nis: &BTreeMap<String, f64>,
    wf: f64,
) -> Result<Vec<CandidateScore>, AggregateError> {
    if !(0.0..=1.0).contains(&wf) {
        return Err(AggregateError::Weight(wf));
    }
    check_aligned(nps, nis)?;
    let mut out: Vec<CandidateScore> = nps
        .iter()
        .map(|(d, &p)| {
            let i = nis[d];
            CandidateScore {
                developer: d.clone(),
                fs: p + wf * i,
                nps: p,
                nis: i,
            }
        })
        .collect();
    sort_scores(&mut out);
    Ok(out)
}

pub fn sort_scores(scores: &mut [CandidateScore]) {
    scores.sort_by(|a, b| {
        b.fs.total_cmp(&a.fs)
            .then(b.nps.total_cmp(&a.nps))
            .then_with(|| a.developer.cmp(&b.developer))
    });
}

/// Borda count over two full rankings of the same `n` candidates. A
/// candidate at 0-based position `r` earns `n - r` points per ranking; ties
/// keep the order of `rank_a`.
pub fn borda(rank_a: &[String], rank_b: &[String]) -> Result<Vec<(String, usize)>, AggregateError> {
    let pos = |rank: &[String]| -> Result<BTreeMap<String, usize>, AggregateError> {
        let mut m = BTreeMap::new();
        for (i, d) in rank.iter().enumerate() {
            if m.insert(d.clone(), i).is_some() {
                return Err(AggregateError::Duplicate(d.clone()));
            }
        }
        Ok(m)
    };
    let (pa, pb) = (pos(rank_a)?, pos(rank_b)?);
    check_aligned(&pa, &pb)?;
    let n = rank_a.len();
    let mut out: Vec<(usize, String, usize)> = rank_a
        .iter()
        .enumerate()
        .map(|(i, d)| (i, d.clone(), (n - i) + (n - pb[d])))
        .collect();
    out.sort_by(|x, y| y.2.cmp(&x.2).then(x.0.cmp(&y.0)));
    Ok(out.into_iter().map(|(_, d, p)| (d, p)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(v: &[(&str, f64)]) -> BTreeMap<String, f64> {
        v.iter().map(|(d, s)| (d.to_string(), *s)).collect()
    }

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn fused_score_example() {
        let r = wra(&map(&[("d1", 0.6)]), &map(&[("d1", 0.5)]), 0.65).unwrap();
        assert!((r[0].fs - 0.925).abs() < 1e-12);
    }

    #[test]
    fn interaction_can_overturn_content() {
        let nps = map(&[("d1", 1.0), ("d2", 0.8)]);
        let nis = map(&[("d1", 0.0), ("d2", 1.0)]);
        let r = wra(&nps, &nis, 0.65).unwrap();
        assert_eq!(r[0].developer, "d2");
        assert!((r[0].fs - 1.45).abs() < 1e-12);
        assert_eq!(r[1].fs, 1.0);
    }

    #[test]
    fn ties_break_on_nps_then_id() {
        let nps = map(&[("b", 0.5), ("a", 0.5), ("c", 1.0)]);
        let nis = map(&[("b", 1.0), ("a", 1.0), ("c", 0.0)]);
        let r = wra(&nps, &nis, 0.5).unwrap();
        let order: Vec<_> = r.iter().map(|c| c.developer.as_str()).collect();
        assert_eq!(order, ["c", "a", "b"]);
    }

    #[test]
    fn misaligned_and_bad_weight() {
        assert_eq!(
            wra(&map(&[("a", 1.0)]), &map(&[("b", 1.0)]), 0.5),
            Err(AggregateError::Misaligned(ids(&["a", "b"])))
        );
        assert_eq!(wra(&map(&[]), &map(&[]), 1.5), Err(AggregateError::Weight(1.5)));
    }

    #[test]
    fn borda_example() {
        let r = borda(&ids(&["d1", "d2", "d3"]), &ids(&["d2", "d3", "d1"])).unwrap();
        let order: Vec<_> = r.iter().map(|(d, _)| d.as_str()).collect();
        assert_eq!(order, ["d2", "d1", "d3"]);
        assert_eq!(r[0].1, 5);
        assert_eq!(r[1].1, 4);
        assert_eq!(r[2].1, 3);
    }

    #[test]
    fn borda_tie_uses_first_ranking() {
        let r = borda(&ids(&["x", "y"]), &ids(&["y", "x"])).unwrap();
        assert_eq!(r[0].0, "x");
        assert!(borda(&ids(&["x", "x"]), &ids(&["x", "y"])).is_err());
    }

    proptest! {
        #[test]
        fn zero_weight_matches_content_order(vals in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..10)) {
            let nps: BTreeMap<String, f64> = vals.iter().enumerate().map(|(i, v)| (format!("d{i}"), v.0)).collect();
            let nis: BTreeMap<String, f64> = vals.iter().enumerate().map(|(i, v)| (format!("d{i}"), v.1)).collect();
            let r = wra(&nps, &nis, 0.0).unwrap();
            for w in r.windows(2) {
                prop_assert!(w[0].nps >= w[1].nps);
                prop_assert_eq!(w[0].fs, w[0].nps);
            }
        }

        #[test]
        fn raising_nis_never_lowers_rank(
            vals in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..10),
            pick in 0usize..10, bump in 0.0f64..1.0, wf in 0.0f64..1.0,
        ) {
            let pick = pick % vals.len();
            let nps: BTreeMap<String, f64> = vals.iter().enumerate().map(|(i, v)| (format!("d{i}"), v.0)).collect();
            let mut nis: BTreeMap<String, f64> = vals.iter().enumerate().map(|(i, v)| (format!("d{i}"), v.1)).collect();
            let key = format!("d{pick}");
            let rank = |nis: &BTreeMap<String, f64>| wra(&nps, nis, wf).unwrap().iter().position(|c| c.developer == key).unwrap();
            let before = rank(&nis);
            let v = nis[&key];
            nis.insert(key.clone(), (v + bump).min(1.0));
            prop_assert!(rank(&nis) <= before);
        }
    }
}
