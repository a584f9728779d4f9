//! Brute-force reference metrics shared by integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn accuracy(t: &[usize], p: &[usize]) -> f64 {
    let mut hits = 0.0;
    for i in 0..t.len() {
        if t[i] == p[i] {
            hits += 1.0;
        }
    }
    hits / t.len() as f64
}

/// Kappa from sample pairs: 1 − n·Σ(tᵢ−pᵢ)² / ΣₐΣ_b(tₐ−p_b)².
pub fn qwk(t: &[usize], p: &[usize]) -> Option<f64> {
    let n = t.len() as f64;
    let sq = |a: usize, b: usize| (a as f64 - b as f64).powi(2);
    let observed: f64 = t.iter().zip(p).map(|(&a, &b)| sq(a, b)).sum();
    let mut expected = 0.0;
    for &a in t {
        for &b in p {
            expected += sq(a, b);
        }
    }
    if expected == 0.0 {
        return (observed == 0.0).then_some(1.0);
    }
    Some(1.0 - n * observed / expected)
}

/// Pairwise one-vs-rest AUC averaged over scorable classes.
pub fn auc(t: &[usize], probs: &[f64], classes: usize) -> Option<f64> {
    let mut aucs = Vec::new();
    for c in 0..classes {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..t.len() {
            for j in 0..t.len() {
                if t[i] == c && t[j] != c {
                    let (a, b) = (probs[i * classes + c], probs[j * classes + c]);
                    wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                    pairs += 1.0;
                }
            }
        }
        if pairs > 0.0 {
            aucs.push(wins / pairs);
        }
    }
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

pub struct Case {
    pub classes: usize,
    pub targets: Vec<usize>,
    pub preds: Vec<usize>,
    pub probs: Vec<f64>,
}

/// A random case with n ≤ 20 and C ≤ 6; probabilities are coarse so ties occur.
pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(2..=6);
    let n = rng.random_range(1..=20);
    let targets = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let preds = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let mut probs = Vec::with_capacity(n * classes);
    for _ in 0..n {
        let row: Vec<f64> = (0..classes).map(|_| rng.random_range(1..5) as f64).collect();
        let s: f64 = row.iter().sum();
        probs.extend(row.iter().map(|v| v / s));
    }
    Case { classes, targets, preds, probs }
}
