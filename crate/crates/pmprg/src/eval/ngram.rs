//! Sentence-level text-overlap metrics over token sequences. All three work
//! on exact token identity, return values in `[0, 1]`, and are deterministic.

use std::collections::HashMap;
use std::hash::Hash;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n && n > 0 {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Modified (clipped) n-gram precision: candidate n-gram occurrences count
/// only up to their frequency in the reference.
fn clipped_precision<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Option<f64> {
    if candidate.len() < n {
        return None;
    }
    let cand = ngram_counts(candidate, n);
    let reference = ngram_counts(reference, n);
    let total: usize = candidate.len() - n + 1;
    let clipped: usize = cand
        .iter()
        .map(|(gram, c)| (*c).min(reference.get(gram).copied().unwrap_or(0)))
        .sum();
    Some(clipped as f64 / total as f64)
}

/// Geometric mean of clipped 1..n-gram precisions times the brevity penalty.
/// No smoothing: any zero precision (or an empty candidate) gives 0.
pub fn bleu_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "order must be between 1 and 4");
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        match clipped_precision(candidate, reference, k) {
            Some(p) if p > 0.0 => log_sum += p.ln(),
            _ => return 0.0,
        }
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / n as f64).exp()
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F-measure with recall weight `beta`:
/// `(1 + β²)·P·R / (R + β²·P)`; 0 when either side is empty.
pub fn rouge_l_beta<T: Eq>(candidate: &[T], reference: &[T], beta: f64) -> f64 {
    assert!(beta > 0.0, "beta must be positive");
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// `rouge_l_beta` at β = 1 (plain harmonic mean of LCS precision and recall).
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    rouge_l_beta(candidate, reference, 1.0)
}

/// Greedy earliest-unused exact alignment: candidate tokens are matched left
/// to right, each to the first not-yet-used identical reference position.
/// Returns the matched pairs as (candidate index, reference index).
fn align<T: Eq>(candidate: &[T], reference: &[T]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (i, tok) in candidate.iter().enumerate() {
        if let Some(j) = reference.iter().enumerate().position(|(j, r)| !used[j] && r == tok) {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

/// Number of chunks: maximal runs of alignment pairs that are contiguous and
/// in order on both sides.
fn chunk_count(pairs: &[(usize, usize)]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for p in pairs {
        match prev {
            Some((pi, pj)) if p.0 == pi + 1 && p.1 == pj + 1 => {}
            _ => chunks += 1,
        }
        prev = Some(*p);
    }
    chunks
}

/// Exact-match unigram metric: `F_mean · (1 − penalty)` with
/// `F_mean = 10·P·R / (R + 9·P)` and `penalty = 0.5 · (chunks / m)³`.
/// Zero when no token matches.
pub fn meteor<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let pairs = align(candidate, reference);
    let m = pairs.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let chunks = chunk_count(&pairs) as f64;
    let penalty = 0.5 * (chunks / m).powi(3);
    f_mean * (1.0 - penalty)
}
