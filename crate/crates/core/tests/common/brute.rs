//! Brute-force oracles: exhaustive two-means splits, pairwise covariance
//! sums and a pixel-level crossing detector for synthetic images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use roadsafe::da::{cov_between_matrix, cov_within_matrix, FeatureBatch};
use roadsafe::geo::{kmeans_bin, synth_generate, LabelingConfig, SynthConfig, STRIP_THRESHOLD};
use roadsafe::Label;

/// Minimum within-cluster sum of squares over every threshold split of the
/// sorted distinct values. Returns the optimum and how many splits attain it.
pub fn exhaustive_two_means(scores: &[f64]) -> (f64, Vec<Vec<Label>>) {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut best = f64::INFINITY;
    let mut winners = Vec::new();
    for cut in &distinct[..distinct.len() - 1] {
        let labels: Vec<Label> = scores
            .iter()
            .map(|s| if s > cut { Label::Dangerous } else { Label::Safe })
            .collect();
        let ss = brute_within_ss(scores, &labels);
        if ss < best - 1e-9 {
            best = ss;
            winners = vec![labels];
        } else if (ss - best).abs() <= 1e-9 {
            winners.push(labels);
        }
    }
    (best, winners)
}

pub fn brute_within_ss(scores: &[f64], labels: &[Label]) -> f64 {
    let mut total = 0.0;
    for class in [Label::Safe, Label::Dangerous] {
        let members: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, l)| **l == class)
            .map(|(s, _)| *s)
            .collect();
        if !members.is_empty() {
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            total += members.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>();
        }
    }
    total
}

/// Accident-count-like multisets: mostly small integers with a heavy tail,
/// plus some uniform real-valued ones.
pub fn random_multiset(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(2..=50);
    let style = rng.random_range(0..3);
    let mut v: Vec<f64> = (0..n)
        .map(|_| match style {
            0 => rng.random_range(0..4) as f64,
            1 => {
                let u: f64 = rng.random_range(0.0..1.0);
                (u.powi(4) * 40.0).floor()
            }
            _ => rng.random_range(-5.0..5.0),
        })
        .collect();
    if v.iter().all(|x| *x == v[0]) {
        v[0] += 1.0;
    }
    v
}

pub fn kmeans_oracle_mismatches(trials: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for _ in 0..trials {
        let scores = random_multiset(&mut rng);
        let (best, winners) = exhaustive_two_means(&scores);
        let b = kmeans_bin(&scores, &LabelingConfig::default()).unwrap();
        let ss = brute_within_ss(&scores, &b.assignments);
        if (ss - best).abs() > 1e-9 || !winners.contains(&b.assignments) {
            bad.push(scores);
        }
    }
    bad
}

/// `sum over ordered pairs (a_i - a_j)(a_i - a_j)^T` within each class.
pub fn pairwise_within(x: &[Vec<f64>], y: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for class in [x, y] {
        for a in class {
            for b in class {
                for r in 0..d {
                    for c in 0..d {
                        out[r * d + c] += (a[r] - b[r]) * (a[c] - b[c]);
                    }
                }
            }
        }
    }
    out
}

/// `sum over i in x, j in y of (x_i - y_j)(x_i - y_j)^T`.
pub fn pairwise_between(x: &[Vec<f64>], y: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for a in x {
        for b in y {
            for r in 0..d {
                for c in 0..d {
                    out[r * d + c] += (a[r] - b[r]) * (a[c] - b[c]);
                }
            }
        }
    }
    out
}

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

/// Largest relative disagreement, floored at an absolute scale of one,
/// between the closed forms and the pairwise sums over `trials` random
/// batches with n <= 32 and d <= 16.
pub fn covariance_oracle_error(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let d = rng.random_range(1..=16);
        let n = rng.random_range(2..=32);
        let nx = rng.random_range(0..=n);
        let batch = FeatureBatch {
            x: random_rows(&mut rng, nx, d),
            y: random_rows(&mut rng, n - nx, d),
        };
        let w = cov_within_matrix(&batch).unwrap();
        let b = cov_between_matrix(&batch).unwrap();
        let (pw, pb) = (
            pairwise_within(&batch.x, &batch.y, d),
            pairwise_between(&batch.x, &batch.y, d),
        );
        for (got, want) in w.data().iter().zip(&pw).chain(b.data().iter().zip(&pb)) {
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
        }
    }
    worst
}

/// Longest run of strip-coloured pixels along any row and any column,
/// judged after undoing the palette transform.
pub fn strip_runs(img: &roadsafe::imageio::RgbImage, style: &roadsafe::geo::DomainStyle) -> (usize, usize) {
    let (w, h) = (img.width, img.height);
    let on = |x: usize, y: usize| style.invert(img.get(x, y)).iter().all(|&c| c >= STRIP_THRESHOLD);
    let longest = |cells: &mut dyn Iterator<Item = bool>| {
        let (mut best, mut cur) = (0, 0);
        for c in cells {
            cur = if c { cur + 1 } else { 0 };
            best = best.max(cur);
        }
        best
    };
    let row = (0..h)
        .map(|y| longest(&mut (0..w).map(|x| on(x, y))))
        .max()
        .unwrap_or(0);
    let col = (0..w)
        .map(|x| longest(&mut (0..h).map(|y| on(x, y))))
        .max()
        .unwrap_or(0);
    (row, col)
}

/// Fraction of images whose label disagrees with the crossing detector.
pub fn synth_detector_disagreement(cfg: &SynthConfig) -> f64 {
    let set = synth_generate(cfg).unwrap();
    let style = cfg.style();
    let (thick, _) = cfg.strip_geometry();
    let long = 2 * thick + 2;
    let wrong = set
        .images
        .iter()
        .filter(|im| {
            let (row, col) = strip_runs(&im.image, &style);
            let crossing = row >= long && col >= long;
            crossing != (im.label == Label::Dangerous)
        })
        .count();
    wrong as f64 / set.images.len() as f64
}
