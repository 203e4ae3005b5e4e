#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use loca_core::corpus::{ExpertLabel, QaPair};
use loca_core::gateway::{tags, CompletionRequest, FnGateway, GatewayError};

pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn fixture(name: &str) -> String {
    std::fs::read_to_string(fixture_path(name)).unwrap_or_else(|e| panic!("fixture {name}: {e}"))
}

pub fn electrolyte_pair() -> QaPair {
    let mut pair = QaPair::new("q-250", fixture("electrolyte_question.md"), fixture("electrolyte_raw.md"));
    pair.expert_label = Some(ExpertLabel::Wrong);
    pair
}

pub fn apple_pair(id: &str) -> QaPair {
    QaPair::new(id, fixture("apple_question.txt"), fixture("apple_raw.txt"))
}

/// Reference loop outcome for a verdict sequence: `Some((passed, length))`
/// once a bound is hit, `None` if the sequence runs out first.
pub fn reference(seq: &[bool], corr_max: u32, wrg_max: u32) -> Option<(bool, usize)> {
    let (mut c, mut w) = (0, 0);
    for (i, &ok) in seq.iter().enumerate() {
        if ok { c += 1 } else { w += 1; c = 0 }
        if c >= corr_max { return Some((true, i + 1)); }
        if w >= wrg_max { return Some((false, i + 1)); }
    }
    None
}

/// Gateway that plays a verdict per iteration for each scope: the augmenter
/// always answers with the apple solution, the assumption reviewer says
/// `Wrong` on a failing iteration and everything else is `Correct`.
pub fn verdict_gateway(
    plans: HashMap<String, Vec<bool>>,
) -> FnGateway<impl Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync> {
    let solution = fixture("apple_refined.md");
    let iteration: Mutex<BTreeMap<String, usize>> = Mutex::new(BTreeMap::new());
    FnGateway(move |req: &CompletionRequest| {
        let mut it = iteration.lock().unwrap();
        let n = it.entry(req.scope.clone()).or_default();
        Ok(match req.tag.as_str() {
            tags::AUGMENTATION => {
                *n += 1;
                solution.clone()
            }
            tags::REVIEW_ASSUMPTION => {
                let ok = plans
                    .get(&req.scope)
                    .and_then(|plan| plan.get(*n - 1).copied())
                    .unwrap_or(true);
                if ok { "Fine.\nCorrect".into() } else { "The principle is misapplied.\nWrong".into() }
            }
            tags::REVIEW_DERIVATION => "Algebra checks out.\nCorrect".into(),
            tags::SUMMARIZATION => "The principle is misapplied.".into(),
            tags::JUDGE => "Same.\nCorrect".into(),
            other => panic!("unexpected tag {other}"),
        })
    })
}

/// Every regular file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

pub fn read_jsonl(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
