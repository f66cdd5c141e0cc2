//! k-means++ seeding followed by Lloyd iterations, used to partition an
//! image embedding into regions.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, dim_err, Error, Result};

pub const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster id per input vector.
    pub assignments: Vec<usize>,
    /// `n × dim` centroids, row-major.
    pub centroids: Vec<f64>,
    pub dim: usize,
    pub iterations: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn count_distinct(points: &[f64], dim: usize, limit: usize) -> usize {
    let mut seen: Vec<&[f64]> = Vec::new();
    for p in points.chunks_exact(dim) {
        if !seen.iter().any(|s| *s == p) {
            seen.push(p);
            if seen.len() >= limit {
                break;
            }
        }
    }
    seen.len()
}

/// Clusters `points` (row-major, `dim` columns) into `n` groups.
pub fn kmeans(points: &[f64], dim: usize, n: usize, seed: u64) -> Result<Clustering> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(dim_err!("{} values cannot form {dim}-dimensional vectors", points.len()));
    }
    let count = points.len() / dim;
    if n == 0 || n > count {
        return Err(arg_err!("cluster count {n} outside 1..={count}"));
    }
    let distinct = count_distinct(points, dim, n);
    if distinct < n {
        return Err(Error::DegenerateCluster(alloc::format!(
            "{n} clusters requested but only {distinct} distinct vectors"
        )));
    }
    let rows = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Vec::with_capacity(n * dim);
    centroids.extend_from_slice(rows(rng.random_range(0..count)));
    let mut d2: Vec<f64> = (0..count).map(|i| dist2(rows(i), &centroids[..dim])).collect();
    for _ in 1..n {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = count - 1;
        for (i, w) in d2.iter().enumerate() {
            if *w > 0.0 && target < *w {
                pick = i;
                break;
            }
            target -= w;
        }
        // Guard against rounding landing on an already chosen point.
        if d2[pick] == 0.0 {
            pick = d2.iter().position(|w| *w > 0.0).expect("distinct vectors remain");
        }
        centroids.extend_from_slice(rows(pick));
        let c = &centroids[centroids.len() - dim..];
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist2(rows(i), c));
        }
    }

    let mut assignments = vec![usize::MAX; count];
    let mut iterations = 0;
    while iterations < MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let mut changed = false;
        for (i, a) in assignments.iter_mut().enumerate() {
            let best = (0..n)
                .map(|k| dist2(rows(i), &centroids[k * dim..(k + 1) * dim]))
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (k, d)| if d < acc.1 { (k, d) } else { acc })
                .0;
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; n * dim];
        let mut counts = vec![0usize; n];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(rows(i)) {
                *s += v;
            }
        }
        for k in 0..n {
            // An emptied cluster keeps its previous centroid.
            if counts[k] > 0 {
                for (c, s) in centroids[k * dim..(k + 1) * dim].iter_mut().zip(&sums[k * dim..]) {
                    *c = s / counts[k] as f64;
                }
            }
        }
    }
    Ok(Clustering { assignments, centroids, dim, iterations })
}
