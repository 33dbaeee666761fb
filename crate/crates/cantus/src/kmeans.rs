//! Seeded k-means with k-means++ initialization. Assignment fans out over
//! frames; centroid updates accumulate sequentially so results are identical
//! with and without the parallel feature.

use crate::par;
use crate::rng::{seeded, Rng};
use crate::tensor::Mat;
use rand::Rng as _;

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Index of the nearest centroid (ties break toward the lower index).
pub fn nearest(point: &[f32], centroids: &Mat) -> usize {
    let mut best = 0usize;
    let mut best_d = f32::INFINITY;
    for (i, c) in centroids.iter_rows().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn kmeanspp_init(points: &Mat, k: usize, rng: &mut Rng) -> Mat {
    let n = points.rows;
    let mut centroids = Mat::zeros(k, points.cols);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut dist: Vec<f32> = (0..n).map(|i| sq_dist(points.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().map(|&d| f64::from(d)).sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let threshold = rng.random::<f64>() * total;
            let mut acc = 0.0f64;
            let mut sel = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                acc += f64::from(d);
                if acc >= threshold {
                    sel = i;
                    break;
                }
            }
            sel
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for i in 0..n {
            dist[i] = dist[i].min(sq_dist(points.row(i), centroids.row(c)));
        }
    }
    centroids
}

/// Lloyd iterations until assignments stop changing or `max_iter` is hit.
/// Empty clusters keep their previous centroid.
pub fn kmeans(points: &Mat, k: usize, max_iter: usize, seed: u64) -> Mat {
    assert!(points.rows > 0, "kmeans needs at least one point");
    let k = k.min(points.rows).max(1);
    let mut rng = seeded(seed);
    let mut centroids = kmeanspp_init(points, k, &mut rng);
    let mut assign: Vec<usize> = vec![usize::MAX; points.rows];
    for _ in 0..max_iter {
        let new_assign = par::map_indexed(points.rows, |i| nearest(points.row(i), &centroids));
        if new_assign == assign {
            break;
        }
        assign = new_assign;
        let mut sums = vec![0.0f64; k * points.cols];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            let dst = &mut sums[a * points.cols..(a + 1) * points.cols];
            for (s, &x) in dst.iter_mut().zip(points.row(i)) {
                *s += f64::from(x);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let row = centroids.row_mut(c);
            let src = &sums[c * points.cols..(c + 1) * points.cols];
            for (dst, &s) in row.iter_mut().zip(src) {
                *dst = (s / counts[c] as f64) as f32;
            }
        }
    }
    centroids
}
