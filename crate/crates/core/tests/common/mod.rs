#![allow(dead_code)]

use std::path::PathBuf;

use data_dividends::ObservationTable;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn manifest_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(rel)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Gaussian features, labels from a noisy linear rule with `flip` label noise.
/// Retries until both classes appear.
pub fn logistic_table(rng: &mut ChaCha8Rng, n: usize, d: usize, flip: f64, ids: Vec<String>) -> ObservationTable {
    let w: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    loop {
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
            let s: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.5 * normal(rng);
            let mut y: i8 = if s >= 0.0 { 1 } else { -1 };
            if rng.random::<f64>() < flip {
                y = -y;
            }
            features.extend(x);
            labels.push(y);
        }
        if labels.contains(&1) && labels.contains(&-1) {
            return ObservationTable::new(features, d, labels, ids).unwrap();
        }
    }
}

pub fn one_to_one_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Sign agreement restricted to points whose |exact| is above the median |exact|.
pub fn sign_agreement_above_median(estimated: &[f64], exact: &[f64]) -> f64 {
    let mut mags: Vec<f64> = exact.iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let n = mags.len();
    let med = if n % 2 == 1 {
        mags[n / 2]
    } else {
        0.5 * (mags[n / 2 - 1] + mags[n / 2])
    };
    let picked: Vec<usize> = (0..n).filter(|&i| exact[i].abs() > med).collect();
    let agree = picked
        .iter()
        .filter(|&&i| estimated[i].signum() == exact[i].signum())
        .count();
    agree as f64 / picked.len() as f64
}

/// Mean absolute pairwise difference over twice the mean, 0-100 scale,
/// with the `n - 1` correction.
pub fn brute_gini(x: &[f64]) -> f64 {
    let n = x.len();
    let total: f64 = x.iter().sum();
    let mut diff = 0.0;
    for a in x {
        for b in x {
            diff += (a - b).abs();
        }
    }
    100.0 * diff / (2.0 * (n - 1) as f64 * total)
}

/// Observation counts proportional to `rank^-exponent`, scaled so the last
/// contributor owns exactly one observation.
pub fn zipf_counts(n_contributors: usize, exponent: f64) -> Vec<usize> {
    let top = (n_contributors as f64).powf(exponent);
    (1..=n_contributors)
        .map(|k| ((top * (k as f64).powf(-exponent)).round() as usize).max(1))
        .collect()
}
