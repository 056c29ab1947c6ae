//! Mean silhouette over latent patches, used to pick K without labels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Standard silhouette with Euclidean distance. Points beyond `cap` are
/// subsampled with the given seed for tractability; singleton-cluster points
/// and degenerate `a == b == 0` points score 0 by convention.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize], cap: usize, seed: u64) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    let distinct = {
        let mut seen = labels.to_vec();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    };
    if distinct < 2 {
        return Err(Error::InvalidArg(format!(
            "silhouette needs >= 2 nonempty clusters, got {distinct}"
        )));
    }

    let mut idx: Vec<usize> = (0..points.len()).collect();
    if points.len() > cap {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(cap);
        idx.sort_unstable();
    }
    let sub_points: Vec<&Vec<f64>> = idx.iter().map(|&i| &points[i]).collect();
    let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let k = sub_labels.iter().copied().max().unwrap() + 1;
    let mut cluster_sizes = vec![0usize; k];
    for &l in &sub_labels {
        cluster_sizes[l] += 1;
    }
    if cluster_sizes.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::InvalidArg(
            "subsample collapsed to a single cluster; raise the cap".into(),
        ));
    }

    let n = sub_points.len();
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut sums = vec![0.0f64; k];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d = euclid(sub_points[i], sub_points[j]);
                sums[sub_labels[j]] += d;
            }
            let own = sub_labels[i];
            if cluster_sizes[own] <= 1 {
                return 0.0;
            }
            let a = sums[own] / (cluster_sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && cluster_sizes[c] > 0)
                .map(|c| sums[c] / cluster_sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / n as f64)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
