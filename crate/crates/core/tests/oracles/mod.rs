//! Brute-force references shared by the core tests and the acceptance
//! suite.
#![allow(dead_code)]

use samic_core::{Connectivity, PointPrompt};

/// Reference labeling: union-find over the grid, then one pass collecting
/// moments. Components are ordered by their first pixel in row-major order.
pub fn brute_force_centroids(grid: &[bool], w: usize, h: usize, conn: Connectivity) -> Vec<(f64, f64)> {
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut parent: Vec<usize> = (0..grid.len()).collect();
    let diag = matches!(conn, Connectivity::Eight);
    for y in 0..h {
        for x in 0..w {
            if !grid[y * w + x] {
                continue;
            }
            let mut nbrs = vec![];
            if x + 1 < w {
                nbrs.push((x + 1, y));
            }
            if y + 1 < h {
                nbrs.push((x, y + 1));
                if diag && x + 1 < w {
                    nbrs.push((x + 1, y + 1));
                }
                if diag && x > 0 {
                    nbrs.push((x - 1, y + 1));
                }
            }
            for (nx, ny) in nbrs {
                if grid[ny * w + nx] {
                    let (a, b) = (find(&mut parent, y * w + x), find(&mut parent, ny * w + nx));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut order: Vec<usize> = Vec::new();
    let mut sums: std::collections::HashMap<usize, (f64, f64, f64)> = Default::default();
    for i in 0..grid.len() {
        if grid[i] {
            let r = find(&mut parent, i);
            let e = sums.entry(r).or_insert_with(|| {
                order.push(r);
                (0.0, 0.0, 0.0)
            });
            e.0 += (i % w) as f64;
            e.1 += (i / w) as f64;
            e.2 += 1.0;
        }
    }
    order.iter().map(|r| sums[r]).map(|(mx, my, a)| (mx / a, my / a)).collect()
}

/// `k` points on a jittered 3×3 lattice: far enough apart for any `k ≤ 8`,
/// and far enough from the border that no blob is clipped.
pub fn separated_points(rng: &mut impl rand::Rng, k: usize, size: f64, sep: f64, margin: f64) -> Vec<PointPrompt> {
    let step = (size - 1.0 - 2.0 * margin) / 2.0;
    let jitter = (step - sep) / 2.0;
    assert!(jitter >= 0.0);
    let mut nodes: Vec<usize> = (0..9).collect();
    rand::seq::SliceRandom::shuffle(nodes.as_mut_slice(), rng);
    nodes[..k]
        .iter()
        .map(|n| {
            let (i, j) = ((n % 3) as f64, (n / 3) as f64);
            let x = margin + i * step + rng.random_range(-jitter..=jitter);
            let y = margin + j * step + rng.random_range(-jitter..=jitter);
            PointPrompt::new(x.clamp(margin, size - 1.0 - margin), y.clamp(margin, size - 1.0 - margin))
        })
        .collect()
}

pub fn at(x: &[f64], dims: [usize; 5], i: usize, p: [isize; 4]) -> f64 {
    if (0..4).any(|k| p[k] < 0 || p[k] >= dims[k + 1] as isize) {
        return 0.0;
    }
    let [_, a, b, d, e] = dims;
    let idx = (((i * a + p[0] as usize) * b + p[1] as usize) * d + p[2] as usize) * e + p[3] as usize;
    x[idx]
}

/// Eight nested loops over the definition of a same-padded, strided 4D
/// cross-correlation.
pub fn dense_reference(x: &[f64], dims: [usize; 5], w: &[f64], bias: &[f64], o: usize, k: [usize; 4], s: [usize; 4]) -> Vec<f64> {
    let i_n = dims[0];
    let od: Vec<usize> = (0..4).map(|j| dims[j + 1].div_ceil(s[j])).collect();
    let mut out = Vec::new();
    for oc in 0..o {
        for a in 0..od[0] {
            for b in 0..od[1] {
                for d in 0..od[2] {
                    for e in 0..od[3] {
                        let mut acc = bias[oc];
                        for ic in 0..i_n {
                            for u0 in 0..k[0] {
                                for u1 in 0..k[1] {
                                    for u2 in 0..k[2] {
                                        for u3 in 0..k[3] {
                                            let p = [
                                                (a * s[0] + u0) as isize - (k[0] / 2) as isize,
                                                (b * s[1] + u1) as isize - (k[1] / 2) as isize,
                                                (d * s[2] + u2) as isize - (k[2] / 2) as isize,
                                                (e * s[3] + u3) as isize - (k[3] / 2) as isize,
                                            ];
                                            let wi = ((((oc * i_n + ic) * k[0] + u0) * k[1] + u1) * k[2] + u2) * k[3] + u3;
                                            acc += w[wi] * at(x, dims, ic, p);
                                        }
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    out
}

/// Center-pivot by its definition: a 2D kernel over the context axes at the
/// kept target position plus a 2D kernel over the target axes at the kept
/// context position.
#[allow(clippy::too_many_arguments)]
pub fn pivot_reference(x: &[f64], dims: [usize; 5], params: &[f64], o: usize, k: [usize; 4], s: [usize; 4]) -> Vec<f64> {
    let i_n = dims[0];
    let (lc, lt) = (o * i_n * k[0] * k[1], o * i_n * k[2] * k[3]);
    let (wc, rest) = params.split_at(lc);
    let (bc, rest) = rest.split_at(o);
    let (wt, bt) = rest.split_at(lt);
    let od: Vec<usize> = (0..4).map(|j| dims[j + 1].div_ceil(s[j])).collect();
    let mut out = Vec::new();
    for oc in 0..o {
        for a in 0..od[0] {
            for b in 0..od[1] {
                for d in 0..od[2] {
                    for e in 0..od[3] {
                        let (ca, cb, cd, ce) = ((a * s[0]) as isize, (b * s[1]) as isize, (d * s[2]) as isize, (e * s[3]) as isize);
                        let mut acc = bc[oc] + bt[oc];
                        for ic in 0..i_n {
                            for u in 0..k[0] {
                                for v in 0..k[1] {
                                    let p = [ca + u as isize - (k[0] / 2) as isize, cb + v as isize - (k[1] / 2) as isize, cd, ce];
                                    acc += wc[((oc * i_n + ic) * k[0] + u) * k[1] + v] * at(x, dims, ic, p);
                                }
                            }
                            for u in 0..k[2] {
                                for v in 0..k[3] {
                                    let p = [ca, cb, cd + u as isize - (k[2] / 2) as isize, ce + v as isize - (k[3] / 2) as isize];
                                    acc += wt[((oc * i_n + ic) * k[2] + u) * k[3] + v] * at(x, dims, ic, p);
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    out
}
