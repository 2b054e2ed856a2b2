//! Issue ingestion: text normalization, owner resolution, active-developer
//! filtering, chronological splitting and class-balancing sample weights.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reports with fewer normalized words than this are dropped.
pub const MIN_WORDS: usize = 15;

/// Default minimum number of owned reports for a developer to count as active.
pub const DEFAULT_ACTIVE_THRESHOLD: usize = 20;

pub const HEX_TOKEN: &str = "<hex>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed report: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("report {report}: invalid timestamp {value:?}")]
    Timestamp { report: String, value: String },
    #[error("report {report}, event {index}: unknown interaction kind {kind:?}")]
    UnknownInteractionKind {
        report: String,
        index: usize,
        kind: String,
    },
    #[error("report {0} has no resolved owner")]
    UnresolvedOwner(String),
    #[error("train fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("no report survived filtering")]
    EmptyCorpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    Assignment,
    CommitOrPr,
    Discussion,
}

impl InteractionKind {
    pub const ALL: [InteractionKind; 3] = [
        InteractionKind::Assignment,
        InteractionKind::CommitOrPr,
        InteractionKind::Discussion,
    ];

    /// Accepts the canonical names plus the common GitHub timeline spellings.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "assignment" | "assigned" | "assign" => Some(Self::Assignment),
            "commit_or_pr" | "commit" | "pr" | "pull_request" | "committed" => {
                Some(Self::CommitOrPr)
            }
            "discussion" | "comment" | "commented" | "mentioned" => Some(Self::Discussion),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub actor: String,
    pub kind: InteractionKind,
    pub occurred_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugReport {
    pub id: String,
    pub title: String,
    pub description: String,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub owner: Option<String>,
    #[serde(default)]
    pub components: Vec<String>,
    #[serde(default)]
    pub events: Vec<InteractionEvent>,
}

impl BugReport {
    /// Title and description joined and normalized.
    pub fn normalized_text(&self) -> String {
        normalize_text(&format!("{} {}", self.title, self.description))
    }

    pub fn word_count(&self) -> usize {
        self.normalized_text().split_whitespace().count()
    }
}

/// One line of an issue export as it arrives on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawReport {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub description: String,
    pub created_at: String,
    #[serde(default)]
    pub components: Vec<String>,
    #[serde(default)]
    pub events: Vec<RawEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignee: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawEvent {
    pub actor: String,
    pub kind: String,
    pub occurred_at: String,
}

fn parse_ts(report: &str, value: &str) -> Result<DateTime<Utc>, CorpusError> {
    DateTime::parse_from_rfc3339(value)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|_| CorpusError::Timestamp {
            report: report.to_string(),
            value: value.to_string(),
        })
}

impl RawReport {
    /// Validates timestamps and event kinds, then resolves the owner. A direct
    /// `assignee` on the record takes precedence over the event timeline.
    pub fn into_report(self) -> Result<BugReport, CorpusError> {
        let created_at = parse_ts(&self.id, &self.created_at)?;
        let mut events = Vec::with_capacity(self.events.len());
        for (index, e) in self.events.into_iter().enumerate() {
            let kind =
                InteractionKind::parse(&e.kind).ok_or_else(|| CorpusError::UnknownInteractionKind {
                    report: self.id.clone(),
                    index,
                    kind: e.kind.clone(),
                })?;
            events.push(InteractionEvent {
                actor: e.actor,
                kind,
                occurred_at: parse_ts(&self.id, &e.occurred_at)?,
            });
        }
        // stable: equal timestamps keep ingestion order
        events.sort_by_key(|e| e.occurred_at);
        let mut components: Vec<String> = Vec::new();
        for c in self.components {
            if !components.contains(&c) {
                components.push(c);
            }
        }
        let mut report = BugReport {
            id: self.id,
            title: self.title,
            description: self.description,
            created_at,
            owner: None,
            components,
            events,
        };
        report.owner = self.assignee.or_else(|| resolve_owner(&report));
        Ok(report)
    }
}

struct Patterns {
    fence: Regex,
    url: Regex,
    timestamp: Regex,
    clock: Regex,
    hex: Regex,
    special: Regex,
    space: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        fence: Regex::new(r"```|~~~").unwrap(),
        url: Regex::new(r"(?i)\b(?:https?|ftp)://\S+|\bwww\.\S+").unwrap(),
        timestamp: Regex::new(
            r"\b\d{4}-\d{2}-\d{2}(?:[T ]\d{2}:\d{2}(?::\d{2}(?:[.,]\d+)?)?(?:Z|[+-]\d{2}:?\d{2})?)?",
        )
        .unwrap(),
        clock: Regex::new(r"\b\d{1,2}:\d{2}:\d{2}(?:[.,]\d+)?\b").unwrap(),
        hex: Regex::new(r"0x[0-9a-fA-F]+|<hex>").unwrap(),
        special: Regex::new(r"[^\p{L}\p{N}\s.,;:!?'_-]").unwrap(),
        space: Regex::new(r"\s+").unwrap(),
    })
}

/// Strips code fences, URLs, timestamps and special characters, replaces hex
/// literals with `<hex>`, and collapses whitespace. Idempotent.
pub fn normalize_text(raw: &str) -> String {
    let p = patterns();
    let s = p.fence.replace_all(raw, " ");
    let s = p.url.replace_all(&s, " ");
    let s = p.timestamp.replace_all(&s, " ");
    let s = p.clock.replace_all(&s, " ");

    let mut out = String::with_capacity(s.len());
    let mut last = 0;
    for m in p.hex.find_iter(&s) {
        out.push_str(&p.special.replace_all(&s[last..m.start()], " "));
        out.push(' ');
        out.push_str(HEX_TOKEN);
        out.push(' ');
        last = m.end();
    }
    out.push_str(&p.special.replace_all(&s[last..], " "));
    p.space.replace_all(out.trim(), " ").into_owned()
}

/// Owner of a report: the latest assignee, else the latest committer/PR
/// author, else `None` (the report is discarded). Ties on timestamp go to the
/// event that appears later in the list.
pub fn resolve_owner(report: &BugReport) -> Option<String> {
    let latest = |kind: InteractionKind| {
        report
            .events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == kind)
            .max_by_key(|(i, e)| (e.occurred_at, *i))
            .map(|(_, e)| e.actor.clone())
    };
    latest(InteractionKind::Assignment).or_else(|| latest(InteractionKind::CommitOrPr))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeveloperProfile {
    pub id: String,
    pub contribution_count: usize,
    pub active: bool,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<BugReport>,
    pub test: Vec<BugReport>,
    /// Every owner seen in the input, sorted by id.
    pub developers: Vec<DeveloperProfile>,
}

impl Split {
    pub fn active_developers(&self) -> Vec<String> {
        self.developers
            .iter()
            .filter(|d| d.active)
            .map(|d| d.id.clone())
            .collect()
    }
}

/// Counts owned reports per developer and flags those at or above `threshold`.
pub fn developer_profiles(reports: &[BugReport], threshold: usize) -> Vec<DeveloperProfile> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in reports {
        if let Some(o) = &r.owner {
            *counts.entry(o.as_str()).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(id, c)| DeveloperProfile {
            id: id.to_string(),
            contribution_count: c,
            active: c >= threshold,
        })
        .collect()
}

pub fn filter_and_split(
    reports: &[BugReport],
    threshold: usize,
    train_fraction: f64,
) -> Result<Split, CorpusError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CorpusError::BadFraction(train_fraction));
    }
    if let Some(r) = reports.iter().find(|r| r.owner.is_none()) {
        return Err(CorpusError::UnresolvedOwner(r.id.clone()));
    }
    let developers = developer_profiles(reports, threshold);
    let active: BTreeMap<&str, bool> = developers
        .iter()
        .map(|d| (d.id.as_str(), d.active))
        .collect();

    let mut kept: Vec<BugReport> = reports
        .iter()
        .filter(|r| r.word_count() >= MIN_WORDS)
        .filter(|r| active[r.owner.as_deref().unwrap()])
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    kept.sort_by_key(|r| r.created_at);
    let n_train = (train_fraction * kept.len() as f64).floor() as usize;
    let test = kept.split_off(n_train);
    Ok(Split {
        train: kept,
        test,
        developers,
    })
}

/// Per-issue sampling probabilities inversely proportional to the owner's
/// issue count, so that every owner carries equal total mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights(pub Vec<f64>);

impl SampleWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `label` picks the class of each report (owner or first component).
pub fn sampling_weights_by<F>(train: &[BugReport], label: F) -> SampleWeights
where
    F: Fn(&BugReport) -> Option<&str>,
{
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for r in train {
        *freq.entry(label(r).unwrap_or("")).or_default() += 1;
    }
    let inv: Vec<f64> = train
        .iter()
        .map(|r| 1.0 / freq[label(r).unwrap_or("")] as f64)
        .collect();
    let total: f64 = inv.iter().sum();
    SampleWeights(inv.into_iter().map(|w| w / total).collect())
}

pub fn sampling_weights(train: &[BugReport]) -> SampleWeights {
    sampling_weights_by(train, |r| r.owner.as_deref())
}

pub fn read_raw_jsonl(path: &Path) -> Result<Vec<RawReport>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| CorpusError::Json { line: i + 1, source })?,
        );
    }
    Ok(out)
}

pub fn read_reports_jsonl(path: &Path) -> Result<Vec<BugReport>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| CorpusError::Json { line: i + 1, source })?,
        );
    }
    Ok(out)
}

pub fn write_reports_jsonl(path: &Path, reports: &[BugReport]) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in reports {
        let line = serde_json::to_string(r).expect("report serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestManifest {
    pub input_reports: usize,
    pub discarded_no_owner: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub threshold: usize,
    pub train_fraction: f64,
    pub active_developers: Vec<DeveloperProfile>,
}

/// Full ingest: parse, resolve owners, normalize, filter and split.
pub fn ingest(
    raw: Vec<RawReport>,
    threshold: usize,
    train_fraction: f64,
) -> Result<(Split, IngestManifest), CorpusError> {
    let input_reports = raw.len();
    let mut resolved = Vec::with_capacity(raw.len());
    for r in raw {
        let mut report = r.into_report()?;
        if report.owner.is_none() {
            continue;
        }
        report.title = normalize_text(&report.title);
        report.description = normalize_text(&report.description);
        resolved.push(report);
    }
    let discarded_no_owner = input_reports - resolved.len();
    let split = filter_and_split(&resolved, threshold, train_fraction)?;
    let manifest = IngestManifest {
        input_reports,
        discarded_no_owner,
        train_count: split.train.len(),
        test_count: split.test.len(),
        threshold,
        train_fraction,
        active_developers: split.developers.iter().filter(|d| d.active).cloned().collect(),
    };
    Ok((split, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn ts(day: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, day, 0, 0, 0).unwrap()
    }

    fn ev(actor: &str, kind: InteractionKind, day: u32) -> InteractionEvent {
        InteractionEvent {
            actor: actor.into(),
            kind,
            occurred_at: ts(day),
        }
    }

    fn report(id: &str, owner: &str, day: u32, words: usize) -> BugReport {
        BugReport {
            id: id.into(),
            title: "crash".into(),
            description: vec!["word"; words.saturating_sub(1)].join(" "),
            created_at: ts(day),
            owner: Some(owner.into()),
            components: vec![],
            events: vec![],
        }
    }

    #[test]
    fn hex_literals_become_tokens() {
        assert_eq!(
            normalize_text("Memory error at 0x7fff5fbff7a0"),
            "Memory error at <hex>"
        );
    }

    #[test]
    fn empty_text_stays_empty() {
        assert_eq!(normalize_text(""), "");
    }

    #[test]
    fn urls_fences_removed() {
        assert_eq!(
            normalize_text("see https://x.y/z crash at 0xAB ```log```"),
            "see crash at <hex> log"
        );
    }

    #[test]
    fn timestamps_removed() {
        assert_eq!(
            normalize_text("failed 2024-03-01T12:30:00Z then again at 14:02:11 ok"),
            "failed then again at ok"
        );
        assert_eq!(normalize_text("built on 2023-11-30 fine"), "built on fine");
    }

    #[test]
    fn special_characters_removed() {
        assert_eq!(normalize_text("a*b #42 {x} [y]"), "a b 42 x y");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,80}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once.clone());
        }

        #[test]
        fn normalize_is_idempotent_on_structured(
            parts in proptest::collection::vec(
                prop_oneof![
                    Just("0xdeadBEEF".to_string()),
                    Just("https://a.b/c?d=1".to_string()),
                    Just("2024-01-02T03:04:05Z".to_string()),
                    Just("```".to_string()),
                    Just("<hex>".to_string()),
                    Just("12:00:00".to_string()),
                    "[a-z0-9<>:/.-]{1,8}",
                ],
                0..12,
            )
        ) {
            let s = parts.join(" ");
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once.clone());
        }
    }

    #[test]
    fn owner_from_assignment() {
        let mut r = report("1", "x", 1, 20);
        r.events = vec![ev("A", InteractionKind::Assignment, 2)];
        assert_eq!(resolve_owner(&r).as_deref(), Some("A"));
    }

    #[test]
    fn owner_discarded_without_signal() {
        let mut r = report("1", "x", 1, 20);
        r.events = vec![];
        assert_eq!(resolve_owner(&r), None);
        r.events = vec![ev("D", InteractionKind::Discussion, 2)];
        assert_eq!(resolve_owner(&r), None);
    }

    #[test]
    fn owner_latest_commit() {
        let mut r = report("1", "x", 1, 20);
        r.events = vec![
            ev("B", InteractionKind::CommitOrPr, 2),
            ev("C", InteractionKind::CommitOrPr, 3),
        ];
        assert_eq!(resolve_owner(&r).as_deref(), Some("C"));
    }

    #[test]
    fn owner_assignment_beats_later_commit_and_ties_go_to_list_order() {
        let mut r = report("1", "x", 1, 20);
        r.events = vec![
            ev("A", InteractionKind::Assignment, 2),
            ev("B", InteractionKind::Assignment, 2),
            ev("C", InteractionKind::CommitOrPr, 5),
        ];
        assert_eq!(resolve_owner(&r).as_deref(), Some("B"));
    }

    #[test]
    fn raw_record_unknown_kind_names_event() {
        let raw: RawReport = serde_json::from_str(
            r#"{"id":"7","title":"t","description":"d","created_at":"2024-01-01T00:00:00Z",
                "events":[{"actor":"a","kind":"commit","occurred_at":"2024-01-02T00:00:00Z"},
                          {"actor":"b","kind":"starred","occurred_at":"2024-01-02T00:00:00Z"}]}"#,
        )
        .unwrap();
        match raw.into_report() {
            Err(CorpusError::UnknownInteractionKind { report, index, kind }) => {
                assert_eq!((report.as_str(), index, kind.as_str()), ("7", 1, "starred"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn raw_assignee_field_wins() {
        let raw: RawReport = serde_json::from_str(
            r#"{"id":"7","created_at":"2024-01-01T00:00:00Z","assignee":"z",
                "events":[{"actor":"a","kind":"assignment","occurred_at":"2024-01-02T00:00:00Z"}]}"#,
        )
        .unwrap();
        assert_eq!(raw.into_report().unwrap().owner.as_deref(), Some("z"));
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        let mut reports: Vec<BugReport> = (0..20).map(|i| report(&i.to_string(), "a", 1, 20)).collect();
        reports.extend((0..19).map(|i| report(&format!("b{i}"), "b", 2, 20)));
        let split = filter_and_split(&reports, 20, 0.5).unwrap();
        let all: Vec<_> = split.train.iter().chain(&split.test).collect();
        assert_eq!(all.len(), 20);
        assert!(all.iter().all(|r| r.owner.as_deref() == Some("a")));
        assert_eq!(split.active_developers(), vec!["a".to_string()]);
    }

    #[test]
    fn short_reports_dropped() {
        let reports = vec![report("short", "a", 1, 14), report("ok", "a", 2, 15)];
        let split = filter_and_split(&reports, 1, 0.5).unwrap();
        let ids: Vec<_> = split.train.iter().chain(&split.test).map(|r| r.id.as_str()).collect();
        assert_eq!(ids, vec!["ok"]);
    }

    #[test]
    fn chronological_split() {
        let reports: Vec<BugReport> = (1..=10u32)
            .rev()
            .map(|d| report(&d.to_string(), "a", d, 20))
            .collect();
        let split = filter_and_split(&reports, 1, 0.9).unwrap();
        assert_eq!(split.train.len(), 9);
        assert_eq!(split.test.len(), 1);
        assert_eq!(split.test[0].id, "10");
        assert!(split.train.windows(2).all(|w| w[0].created_at <= w[1].created_at));
    }

    #[test]
    fn empty_corpus_error() {
        let reports = vec![report("1", "a", 1, 3)];
        assert!(matches!(
            filter_and_split(&reports, 1, 0.5),
            Err(CorpusError::EmptyCorpus)
        ));
        assert!(matches!(
            filter_and_split(&reports, 1, 1.0),
            Err(CorpusError::BadFraction(_))
        ));
    }

    #[test]
    fn weights_inverse_frequency() {
        let train = vec![
            report("1", "A", 1, 20),
            report("2", "B", 2, 20),
            report("3", "B", 3, 20),
            report("4", "B", 4, 20),
        ];
        let w = sampling_weights(&train);
        let expect = [0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
        for (a, b) in w.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_symmetric_cases() {
        let one_dev: Vec<_> = (0..5).map(|i| report(&i.to_string(), "A", 1, 20)).collect();
        assert!(sampling_weights(&one_dev).as_slice().iter().all(|w| (w - 0.2).abs() < 1e-12));
        let two = vec![report("1", "A", 1, 20), report("2", "B", 1, 20)];
        assert_eq!(sampling_weights(&two).as_slice(), &[0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn weights_balance_developers(owners in proptest::collection::vec(0u8..5, 1..60)) {
            let train: Vec<_> = owners
                .iter()
                .enumerate()
                .map(|(i, o)| report(&i.to_string(), &format!("d{o}"), 1, 20))
                .collect();
            let w = sampling_weights(&train);
            let total: f64 = w.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            let mut per_dev: BTreeMap<&str, f64> = BTreeMap::new();
            for (r, p) in train.iter().zip(w.as_slice()) {
                *per_dev.entry(r.owner.as_deref().unwrap()).or_default() += p;
            }
            let share = 1.0 / per_dev.len() as f64;
            for v in per_dev.values() {
                prop_assert!((v - share).abs() < 1e-9);
            }
        }

        #[test]
        fn split_respects_time_order(days in proptest::collection::vec(1u32..28, 1..40), frac in 0.05f64..0.95) {
            let reports: Vec<_> = days
                .iter()
                .enumerate()
                .map(|(i, d)| report(&i.to_string(), "a", *d, 20))
                .collect();
            let split = filter_and_split(&reports, 1, frac).unwrap();
            prop_assert_eq!(split.train.len(), (frac * reports.len() as f64).floor() as usize);
            if let (Some(last), Some(first)) = (split.train.last(), split.test.first()) {
                prop_assert!(last.created_at <= first.created_at);
            }
            prop_assert!(split.test.windows(2).all(|w| w[0].created_at <= w[1].created_at));
        }
    }
}
