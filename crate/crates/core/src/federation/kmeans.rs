//! Seeded k-means with k-means++ seeding and restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const RESTARTS: usize = 10;
pub const MAX_ITER: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    /// Cluster per point, numbered by first appearance.
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points.iter().map(|p| nearest(p, &centers).1).collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut i = 0;
            while i + 1 < d.len() && (d[i] == 0.0 || r >= d[i]) {
                r -= d[i];
                i += 1;
            }
            i
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[pick].clone());
    }
    centers
}

/// Lloyd iterations from `centers` until assignments stop changing.
pub fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iter: usize) -> KMeansFit {
    let dim = points[0].len();
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for (j, c) in centers.iter_mut().enumerate() {
            if counts[j] > 0 {
                *c = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
    KMeansFit {
        labels,
        centers,
        inertia,
    }
}

fn canonical(fit: KMeansFit) -> KMeansFit {
    let mut order: Vec<usize> = Vec::new();
    for &l in &fit.labels {
        if !order.contains(&l) {
            order.push(l);
        }
    }
    for j in 0..fit.centers.len() {
        if !order.contains(&j) {
            order.push(j);
        }
    }
    let labels = fit
        .labels
        .iter()
        .map(|l| order.iter().position(|o| o == l).expect("listed"))
        .collect();
    let centers = order.iter().map(|&j| fit.centers[j].clone()).collect();
    KMeansFit {
        labels,
        centers,
        inertia: fit.inertia,
    }
}

/// Lowest-inertia fit over `RESTARTS` seeded k-means++ starts.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 || k > points.len() {
        return Err(Error::Invariant(format!(
            "k-means needs 1 <= k <= {} points, got k = {k}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Invariant("k-means points must be finite and equal length".into()));
    }
    let mut best: Option<KMeansFit> = None;
    for r in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let fit = lloyd(points, plus_plus(points, k, &mut rng), MAX_ITER);
        if best.as_ref().map_or(true, |b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(canonical(best.expect("at least one restart")))
}
