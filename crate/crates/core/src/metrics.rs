//! Ranking metrics and aggregation over classes and seeds.

use crate::error::{contract, Error, Result};
use crate::matrix::Matrix;

/// Scores with binary labels, `true` for positives.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(contract(format!("{} scores but {} labels", scores.len(), labels.len())));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(contract("scores contain NaN"));
        }
        Ok(Self { scores, labels })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }

    /// Indices sorted by descending score.
    fn descending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }

    /// `(positives, negatives)` in each run of tied scores, highest first.
    fn tie_groups(&self) -> Vec<(usize, usize)> {
        let order = self.descending();
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut last: Option<f64> = None;
        for i in order {
            let s = self.scores[i];
            if last != Some(s) {
                groups.push((0, 0));
                last = Some(s);
            }
            let g = groups.last_mut().expect("group pushed");
            if self.labels[i] {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        groups
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(s: &ScoredSet) -> Result<f64> {
    let (p, n) = (s.positives(), s.negatives());
    if p == 0 || n == 0 {
        return Err(Error::DegenerateLabels(format!("AUROC needs both classes, got {p} positive / {n} negative")));
    }
    let mut negatives_below = n as f64;
    let mut wins = 0.0;
    for (gp, gn) in s.tie_groups() {
        negatives_below -= gn as f64;
        wins += gp as f64 * (negatives_below + 0.5 * gn as f64);
    }
    Ok(wins / (p as f64 * n as f64))
}

/// Average precision: each threshold's recall gain weighted by its precision.
/// Tied scores form one threshold.
pub fn auprc(s: &ScoredSet) -> Result<f64> {
    let p = s.positives();
    if p == 0 {
        return Err(Error::DegenerateLabels("AUPRC needs at least one positive".into()));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    for (gp, gn) in s.tie_groups() {
        tp += gp;
        seen += gp + gn;
        ap += (gp as f64 / p as f64) * (tp as f64 / seen as f64);
    }
    Ok(ap)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(contract(format!(
            "accuracy needs equal, nonempty inputs; got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// One-vs-rest sets from a `samples x classes` score matrix.
pub fn one_vs_rest(scores: &Matrix, truth: &[usize]) -> Result<Vec<ScoredSet>> {
    if truth.len() != scores.rows() {
        return Err(contract(format!("{} labels for {} score rows", truth.len(), scores.rows())));
    }
    (0..scores.cols())
        .map(|c| {
            ScoredSet::new(
                (0..scores.rows()).map(|i| scores.get(i, c)).collect(),
                truth.iter().map(|&t| t == c).collect(),
            )
        })
        .collect()
}

/// Unweighted mean of `metric` over the per-class sets.
pub fn macro_over_classes(sets: &[ScoredSet], metric: impl Fn(&ScoredSet) -> Result<f64>) -> Result<f64> {
    if sets.is_empty() {
        return Err(contract("macro average over zero classes"));
    }
    let total = sets.iter().map(&metric).sum::<Result<f64>>()?;
    Ok(total / sets.len() as f64)
}

/// Mean and population standard deviation.
pub fn seed_average(runs: &[f64]) -> Result<(f64, f64)> {
    if runs.is_empty() {
        return Err(contract("seed average over zero runs"));
    }
    let k = runs.len() as f64;
    let mean = runs.iter().sum::<f64>() / k;
    let var = runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k;
    Ok((mean, var.sqrt()))
}

/// `mean±std` with three decimals.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3}±{std:.3}")
}
