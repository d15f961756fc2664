//! Global average precision over pooled top-k predictions.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// Top-k `(class, confidence)` pairs for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoPredictions {
    pub video: String,
    pub entries: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionList {
    pub videos: Vec<VideoPredictions>,
}

impl PredictionList {
    pub fn push(&mut self, video: impl Into<String>, entries: Vec<(usize, f64)>) {
        self.videos.push(VideoPredictions {
            video: video.into(),
            entries,
        });
    }
}

/// True fine classes per video id.
pub type GroundTruth = BTreeMap<String, BTreeSet<usize>>;

fn by_confidence(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The `k` highest-scoring classes, ties broken by ascending class index.
pub fn topk_truncate(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut pairs: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    pairs.sort_by(by_confidence);
    pairs.truncate(k);
    pairs
}

/// GAP@k: each video is cut to its top `k`, all `(video, class, confidence)`
/// triples are pooled and sorted by descending confidence (ties by video id
/// then class), and `Σ_i precision(i) · Δrecall(i)` is accumulated with
/// recall measured against every ground-truth label.
pub fn gap_at_k(preds: &PredictionList, truth: &GroundTruth, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let mut pooled: Vec<(f64, &str, usize, bool)> = Vec::new();
    for v in &preds.videos {
        let labels = truth
            .get(&v.video)
            .ok_or_else(|| Error::Input(format!("video {:?} has no ground truth", v.video)))?;
        let mut seen = BTreeSet::new();
        for &(class, conf) in &v.entries {
            if !seen.insert(class) {
                return Err(Error::Input(format!("video {:?} lists class {class} twice", v.video)));
            }
            if conf.is_nan() {
                return Err(Error::Input(format!("video {:?} has a NaN confidence", v.video)));
            }
        }
        let mut entries = v.entries.clone();
        entries.sort_by(by_confidence);
        entries.truncate(k);
        pooled.extend(
            entries
                .into_iter()
                .map(|(class, conf)| (conf, v.video.as_str(), class, labels.contains(&class))),
        );
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));

    let positives: usize = truth.values().map(BTreeSet::len).sum();
    if positives == 0 {
        return Ok(0.0);
    }
    // Precisions are summed first and divided once, so a perfect ranking
    // yields exactly 1.
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (i, &(_, _, _, hit)) in pooled.iter().enumerate() {
        if hit {
            hits += 1;
            precision_sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(precision_sum / positives as f64)
}

/// Fraction of items whose highest-scoring class (ties to the lowest
/// index) is among their true classes.
pub fn hit_at_one(scores: &[Vec<f64>], truth: &[BTreeSet<usize>]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} score rows for {} label sets",
            scores.len(),
            truth.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Input("hit_at_one needs at least one item".into()));
    }
    let hits = scores
        .iter()
        .zip(truth)
        .filter(|(s, t)| topk_truncate(s, 1).first().is_some_and(|&(c, _)| t.contains(&c)))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Expected [`hit_at_one`] of a uniformly random guess over `classes`.
pub fn chance_hit_at_one(truth: &[BTreeSet<usize>], classes: usize) -> f64 {
    if truth.is_empty() || classes == 0 {
        return 0.0;
    }
    truth.iter().map(|t| t.len() as f64 / classes as f64).sum::<f64>() / truth.len() as f64
}
