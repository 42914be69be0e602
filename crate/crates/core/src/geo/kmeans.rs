//! Two-cluster 1-D k-means over safety scores.

use serde::{Deserialize, Serialize};

use super::Label;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelingConfig {
    /// Number of clusters; only 2 is supported.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Kept for config symmetry; the min/max initialization draws nothing.
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    2
}

fn default_max_iterations() -> usize {
    100
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            k: 2,
            max_iterations: default_max_iterations(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Binning {
    pub assignments: Vec<Label>,
    /// `[safe, dangerous]` centroids.
    pub centroids: [f64; 2],
    pub iterations: usize,
    /// Set when every score was identical and all cells were labeled safe.
    pub degenerate: bool,
}

impl Binning {
    pub fn count(&self, label: Label) -> usize {
        self.assignments.iter().filter(|l| **l == label).count()
    }
}

/// Lloyd iterations with centroids seeded at the score minimum and maximum.
/// Ties go to the lower centroid; the higher-centroid cluster is dangerous.
///
/// Lloyd can stop in a local optimum on skewed count data. In one dimension
/// every optimal two-cluster partition is a threshold split, so the result
/// is checked against an exact scan of all sorted cuts and replaced when
/// the scan is strictly better.
pub fn kmeans_bin(scores: &[f64], config: &LabelingConfig) -> Result<Binning> {
    if config.k != 2 {
        return Err(Error::Config(format!("k must be 2, got {}", config.k)));
    }
    if scores.is_empty() {
        return Err(Error::NoRecords);
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Data(format!("non-finite score {bad}")));
    }
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        log::warn!(
            "all {} safety scores equal {min}; labeling every cell safe",
            scores.len()
        );
        return Ok(Binning {
            assignments: vec![Label::Safe; scores.len()],
            centroids: [min, min],
            iterations: 0,
            degenerate: true,
        });
    }

    let mut centroids = [min, max];
    let mut assignments = vec![Label::Safe; scores.len()];
    let mut iterations = 0;
    for it in 0..config.max_iterations.max(1) {
        iterations = it + 1;
        let mut changed = false;
        for (a, &s) in assignments.iter_mut().zip(scores) {
            let next = if (s - centroids[1]).abs() < (s - centroids[0]).abs() {
                Label::Dangerous
            } else {
                Label::Safe
            };
            changed |= next != *a;
            *a = next;
        }
        let mut sum = [0.0; 2];
        let mut n = [0usize; 2];
        for (a, &s) in assignments.iter().zip(scores) {
            sum[a.index()] += s;
            n[a.index()] += 1;
        }
        for k in 0..2 {
            if n[k] > 0 {
                centroids[k] = sum[k] / n[k] as f64;
            }
        }
        if !changed && it > 0 {
            break;
        }
    }
    let lloyd_ss = within_ss(scores, &assignments);
    let (cut, best_ss) = best_threshold(scores);
    if best_ss < lloyd_ss - 1e-12 * lloyd_ss.max(1.0) {
        log::debug!("Lloyd stopped at {lloyd_ss}; exact split reaches {best_ss}");
        assignments = scores
            .iter()
            .map(|&s| if s > cut { Label::Dangerous } else { Label::Safe })
            .collect();
        let mut sum = [0.0; 2];
        let mut n = [0usize; 2];
        for (a, &s) in assignments.iter().zip(scores) {
            sum[a.index()] += s;
            n[a.index()] += 1;
        }
        centroids = [sum[0] / n[0] as f64, sum[1] / n[1] as f64];
    }
    Ok(Binning {
        assignments,
        centroids,
        iterations,
        degenerate: false,
    })
}

/// Exact 1-D two-means: the threshold `t` (scores `<= t` are safe) with the
/// smallest within-cluster sum of squares. Needs two distinct values. On
/// ties the larger threshold wins, matching the lower-centroid tie rule.
fn best_threshold(scores: &[f64]) -> (f64, f64) {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let total: f64 = sorted.iter().sum();
    let total_sq: f64 = sorted.iter().map(|s| s * s).sum();
    let (mut left, mut left_sq) = (0.0, 0.0);
    let mut best = (sorted[0], f64::INFINITY);
    for i in 0..n - 1 {
        left += sorted[i];
        left_sq += sorted[i] * sorted[i];
        if sorted[i] == sorted[i + 1] {
            continue;
        }
        let (nl, nr) = ((i + 1) as f64, (n - i - 1) as f64);
        let right = total - left;
        let ss = (left_sq - left * left / nl) + (total_sq - left_sq - right * right / nr);
        if ss <= best.1 + 1e-12 * best.1.abs().max(1.0) {
            best = (sorted[i], ss.min(best.1));
        }
    }
    best
}

/// Within-cluster sum of squares of a labeling.
pub fn within_ss(scores: &[f64], labels: &[Label]) -> f64 {
    let mut total = 0.0;
    for class in [Label::Safe, Label::Dangerous] {
        let members: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, l)| **l == class)
            .map(|(s, _)| *s)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mean = members.iter().sum::<f64>() / members.len() as f64;
        total += members.iter().map(|s| (s - mean).powi(2)).sum::<f64>();
    }
    total
}
