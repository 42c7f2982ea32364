//! Threshold-sweep oracles for the ranking metrics and the battery they run
//! over. Shared by the metric and acceptance tests.

use predilect::metrics::ScoredSet;

/// Confusion counts at threshold `t`: items scoring `>= t` are called positive.
pub fn confusion(s: &ScoredSet, t: f64) -> (f64, f64) {
    let mut tp = 0.0;
    let mut fp = 0.0;
    for (score, &label) in s.scores.iter().zip(&s.labels) {
        if *score >= t {
            if label {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
    }
    (tp, fp)
}

pub fn thresholds_descending(s: &ScoredSet) -> Vec<f64> {
    let mut t = s.scores.clone();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

/// Trapezoidal area under the ROC polyline through every threshold.
pub fn roc_sweep(s: &ScoredSet) -> f64 {
    let p = s.labels.iter().filter(|&&l| l).count() as f64;
    let n = s.labels.len() as f64 - p;
    let mut prev = (0.0, 0.0);
    let mut area = 0.0;
    for t in thresholds_descending(s) {
        let (tp, fp) = confusion(s, t);
        let cur = (fp / n, tp / p);
        area += (cur.0 - prev.0) * (cur.1 + prev.1) / 2.0;
        prev = cur;
    }
    area
}

/// Sum over thresholds of (recall gain) x (precision at that threshold).
pub fn pr_sweep(s: &ScoredSet) -> f64 {
    let p = s.labels.iter().filter(|&&l| l).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds_descending(s) {
        let (tp, fp) = confusion(s, t);
        let recall = tp / p;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

/// Score patterns for a length: strictly ranked, coarse ties, reversed, flat.
pub fn score_patterns(len: usize) -> Vec<Vec<f64>> {
    vec![
        (0..len).map(|i| ((i * 7 + 3) % len) as f64 / len as f64).collect(),
        (0..len).map(|i| ((i * 5) % 3) as f64 * 0.5).collect(),
        (0..len).map(|i| -(i as f64)).collect(),
        vec![0.25; len],
        (0..len).map(|i| ((i * i + 1) % 4) as f64).collect(),
    ]
}

/// Every label vector for lengths up to 10, a fixed stride of them above.
pub fn label_patterns(len: usize) -> impl Iterator<Item = Vec<bool>> {
    let total = 1u32 << len;
    let stride = if len <= 10 { 1 } else { 7 };
    (0..total).step_by(stride).map(move |mask| (0..len).map(|i| mask >> i & 1 == 1).collect())
}

/// Every (scores, labels) pair of the battery, lengths 1 to 12.
pub fn battery() -> impl Iterator<Item = ScoredSet> {
    (1..=12).flat_map(|len| {
        score_patterns(len)
            .into_iter()
            .flat_map(move |scores| label_patterns(len).map(move |labels| ScoredSet::new(scores.clone(), labels).unwrap()))
    })
}
