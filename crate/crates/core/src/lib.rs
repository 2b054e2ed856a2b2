//! Hybrid bug-triage recommendation engine.
//!
//! A content-based ranker ([`cbr`]) classifies new issues with an ensemble
//! of layered encoders; an interaction-based ranker ([`ibr`]) scores
//! developers by their recent, similarity-weighted activity on related past
//! issues ([`simindex`]); and [`aggregator`] merges both rankings. [`tuner`]
//! grid-searches the interaction parameters and [`eval`] reports Top-k
//! accuracy and significance tests.

pub mod aggregator;
pub mod cbr;
pub mod config;
pub mod corpus;
pub mod engine;
pub mod encoder;
pub mod eval;
pub mod hybrid;
pub mod ibr;
pub mod simindex;
pub mod tensor;
pub mod tuner;

#[cfg(feature = "parallel")]
pub(crate) fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}
