//! Generators and independent oracles shared by the integration tests.
#![allow(dead_code)]

use histovote::predictions::AlignedPredictions;
use rand::Rng;

pub fn sample_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i:05}")).collect()
}

pub fn class_names(c: usize) -> Vec<String> {
    (0..c).map(|j| format!("c{j}")).collect()
}

/// A probability vector whose entries are multiples of `1/units`.
///
/// With `units` a power of two every weighted sum with dyadic weights is exact
/// in `f64`, which keeps comparisons between differently ordered sums exact.
pub fn dyadic_row(rng: &mut impl Rng, c: usize, units: u32) -> Vec<f64> {
    let mut parts = vec![0u32; c];
    for _ in 0..units {
        parts[rng.random_range(0..c)] += 1;
    }
    parts.into_iter().map(|p| f64::from(p) / f64::from(units)).collect()
}

/// A strictly positive probability vector with arbitrary real entries.
pub fn soft_row(rng: &mut impl Rng, c: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

pub fn aligned_from(per_model: &[Vec<Vec<f64>>], truth: Vec<usize>, c: usize) -> AlignedPredictions {
    let n = truth.len();
    AlignedPredictions::from_parts(
        class_names(c),
        (0..per_model.len()).map(|t| format!("m{t}")).collect(),
        sample_ids(n),
        truth,
        per_model,
    )
    .expect("generated predictions are valid")
}

pub fn random_aligned(rng: &mut impl Rng, t: usize, n: usize, c: usize, dyadic: bool) -> AlignedPredictions {
    let per_model: Vec<Vec<Vec<f64>>> = (0..t)
        .map(|_| {
            (0..n)
                .map(|_| if dyadic { dyadic_row(rng, c, 64) } else { soft_row(rng, c) })
                .collect()
        })
        .collect();
    let truth = (0..n).map(|_| rng.random_range(0..c)).collect();
    aligned_from(&per_model, truth, c)
}

/// Dyadic weights summing exactly to one.
pub fn dyadic_weights(rng: &mut impl Rng, t: usize) -> Vec<f64> {
    dyadic_row(rng, t, 64)
}

/// First index of the maximum, by plain comparison.
pub fn first_max(values: &[f64]) -> usize {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values.iter().position(|&v| v == max).unwrap()
}

pub fn binomial(n: u64, k: u64) -> u128 {
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * u128::from(n - i) / u128::from(i + 1);
    }
    acc
}

/// Every vector of `parts` non-negative integers summing to `total`, in
/// lexicographic order, by recursion on the first coordinate.
pub fn compositions(total: u32, parts: usize) -> Vec<Vec<u32>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Average precision recomputed from scratch: for each relevant rank, count
/// the relevant items of the prefix anew.
pub fn brute_force_ap(relevance: &[bool]) -> Option<f64> {
    let relevant = relevance.iter().filter(|&&r| r).count();
    if relevant == 0 {
        return None;
    }
    let mut sum = 0.0;
    for t in 0..relevance.len() {
        if relevance[t] {
            let in_prefix = relevance[..=t].iter().filter(|&&r| r).count();
            sum += in_prefix as f64 / (t + 1) as f64;
        }
    }
    Some(sum / relevant as f64)
}

/// Accuracy of `labels` against `truth`, counted directly.
pub fn accuracy(labels: &[usize], truth: &[usize]) -> f64 {
    let hits = labels.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}
