use serde_json::{json, Value};
use triage_core::corpus::normalize_text;
use triage_core::simindex::ReferenceProvider;
use triage_wasm::{decay_points, explore_json, rerank_json};

#[test]
fn decay_curve_matches_exponential() {
    let pts = decay_points(0.01, 100, 25).unwrap();
    let days: Vec<u32> = pts.iter().map(|p| p.0).collect();
    assert_eq!(days, [0, 25, 50, 75, 100]);
    for (d, w) in pts {
        assert!((w - (-0.01 * d as f64).exp()).abs() < 1e-15);
    }
    assert!(decay_points(-0.1, 10, 1).is_err());
    assert_eq!(decay_points(0.0, 3, 0).unwrap().len(), 4);
}

#[test]
fn rerank_by_hand() {
    let out: Value = serde_json::from_str(
        &rerank_json(r#"{"nps": {"a": 1.0, "b": 0.6, "c": 0.0}, "nis": {"a": 0.0, "b": 1.0, "c": 0.5}, "wf": 0.5}"#).unwrap(),
    )
    .unwrap();
    // a: 1.0, b: 0.6 + 0.5 = 1.1, c: 0.25
    let order: Vec<&str> = out["wra"].as_array().unwrap().iter().map(|c| c["developer"].as_str().unwrap()).collect();
    assert_eq!(order, ["b", "a", "c"]);
    assert!((out["wra"][0]["fs"].as_f64().unwrap() - 1.1).abs() < 1e-12);
    // content a>b>c gives 3,2,1; interactions b>c>a gives 3,2,1
    assert_eq!(out["borda"], json!([["b", 5], ["a", 4], ["c", 3]]));
    assert!(rerank_json(r#"{"nps": {"a": 1.0}, "nis": {"b": 1.0}, "wf": 0.5}"#).is_err());
    assert!(rerank_json(r#"{"nps": {"a": 1.0}, "nis": {"a": 1.0}, "wf": 1.5}"#).is_err());
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

#[test]
fn explore_against_direct_computation() {
    let history = json!([
        {"id": "1", "title": "heap crash", "description": "heap corruption in allocator",
         "created_at": "2024-01-01T00:00:00Z",
         "events": [{"actor": "ann", "kind": "assignment", "occurred_at": "2024-01-02T00:00:00Z"},
                    {"actor": "ben", "kind": "discussion", "occurred_at": "2024-01-03T00:00:00Z"}]},
        {"id": "2", "title": "heap leak", "description": "heap grows in allocator arena",
         "created_at": "2024-02-01T00:00:00Z",
         "events": [{"actor": "ben", "kind": "commit_or_pr", "occurred_at": "2024-02-11T00:00:00Z"}]},
        {"id": "3", "title": "font blur", "description": "fonts render blurry on hidpi",
         "created_at": "2024-03-01T00:00:00Z",
         "events": [{"actor": "cy", "kind": "commit_or_pr", "occurred_at": "2024-03-02T00:00:00Z"}]}
    ]);
    let input = json!({
        "history": history,
        "title": "heap", "description": "allocator heap corruption",
        "tau": 0.3, "lambda": 0.02,
        "points": {"assignment": 0.5, "commit_or_pr": 1.5, "discussion": 0.2},
        "now": "2024-03-01T00:00:00Z", "dim": 64, "seed": 9
    });
    let out: Value = serde_json::from_str(&explore_json(&input.to_string()).unwrap()).unwrap();

    let p = ReferenceProvider::new(64, 9);
    let q = p.embed_one(&normalize_text("heap allocator heap corruption"));
    let doc = |i: usize| {
        let h = &history[i];
        p.embed_one(&normalize_text(&format!("{} {}", h["title"].as_str().unwrap(), h["description"].as_str().unwrap())))
    };
    let s: Vec<f64> = (0..3).map(|i| cosine(&q, &doc(i))).collect();
    assert!(s[0] >= 0.3 && s[1] >= 0.3 && s[2] < 0.3, "{s:?}");
    let hits = out["hits"].as_array().unwrap();
    assert_eq!(hits.len(), 2);

    // days from each event to now: 59, 58, 19; the commit on issue 3 is
    // outside the retrieved set
    let d = |days: f64| (-0.02 * days).exp();
    let ann = 0.5 * s[0] * d(59.0);
    let ben = 0.2 * s[0] * d(58.0) + 1.5 * s[1] * d(19.0);
    let devs = out["developers"].as_array().unwrap();
    let get = |id: &str| devs.iter().find(|v| v["id"] == id).unwrap();
    assert!((get("ann")["is"].as_f64().unwrap() - ann).abs() < 1e-9);
    assert!((get("ben")["is"].as_f64().unwrap() - ben).abs() < 1e-9);
    assert_eq!(get("cy")["is"], json!(0.0));
    assert_eq!(get("ben")["nis"], json!(1.0));
    assert_eq!(get("cy")["nis"], json!(0.0));
    assert!((get("ann")["nis"].as_f64().unwrap() - ann / ben).abs() < 1e-9);
    assert_eq!(devs[0]["id"], "ben");
}
