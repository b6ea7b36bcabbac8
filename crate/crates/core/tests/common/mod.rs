//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use dupnet::geom::Point;
use dupnet::PointCloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point> {
    (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
}

pub fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
    PointCloud::new(random_points(rng, n)).unwrap()
}

/// Uniform cube with a few far-out points, so SOR has something to remove.
pub fn cloud_with_outliers(rng: &mut impl Rng, n: usize) -> PointCloud {
    let mut pts = random_points(rng, n);
    let outliers = rng.gen_range(0..=n / 10);
    for p in pts.iter_mut().take(outliers) {
        for c in p.iter_mut() {
            *c = *c * 3.0 - 1.0;
        }
    }
    PointCloud::new(pts).unwrap()
}

pub fn sq(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Full sort of every other point by (squared distance, index).
pub fn knn_brute(points: &[Point], i: usize, k: usize) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, p)| (sq(&points[i], p), j))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all
}

/// Retained indices of statistical outlier removal, written out directly.
pub fn sor_brute(points: &[Point], k: usize, alpha: f64) -> Vec<usize> {
    let n = points.len();
    let mut d = Vec::with_capacity(n);
    for i in 0..n {
        let nn = knn_brute(points, i, k);
        let mut s = 0.0;
        for &(d2, _) in &nn {
            s += d2.sqrt();
        }
        d.push(s / nn.len() as f64);
    }
    let mut mean = 0.0;
    for v in &d {
        mean += v;
    }
    mean /= n as f64;
    let mut var = 0.0;
    for v in &d {
        var += (v - mean) * (v - mean);
    }
    var /= n as f64;
    let t = mean + alpha * var.sqrt();
    let keep: Vec<usize> = (0..n).filter(|&i| d[i] < t).collect();
    if keep.is_empty() {
        (0..n).collect()
    } else {
        keep
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Minimum over all n! matchings of the mean Euclidean cost.
pub fn emd_brute(x: &[Point], y: &[Point]) -> f64 {
    let n = x.len();
    permutations(n)
        .into_iter()
        .map(|p| (0..n).map(|i| sq(&x[i], &y[p[i]]).sqrt()).sum::<f64>() / n as f64)
        .fold(f64::INFINITY, f64::min)
}

pub fn hausdorff_brute(from: &[Point], to: &[Point]) -> f64 {
    let mut worst: f64 = 0.0;
    for a in from {
        let mut best = f64::INFINITY;
        for b in to {
            best = best.min(sq(a, b).sqrt());
        }
        worst = worst.max(best);
    }
    worst
}

fn mean_min_sq(from: &[Point], to: &[Point]) -> f64 {
    let mut total = 0.0;
    for a in from {
        let mut best = f64::INFINITY;
        for b in to {
            best = best.min(sq(a, b));
        }
        total += best;
    }
    total / from.len() as f64
}

pub fn chamfer_brute(x: &[Point], y: &[Point]) -> f64 {
    0.5 * (mean_min_sq(x, y) + mean_min_sq(y, x))
}

pub fn one_sided_chamfer_brute(reference: &[Point], generated: &[Point]) -> f64 {
    mean_min_sq(generated, reference)
}

/// Random rotation (via a unit quaternion) followed by a translation.
pub fn rigid_motion(rng: &mut impl Rng) -> impl Fn(&Point) -> Point {
    let mut q: [f64; 4] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.iter_mut().for_each(|v| *v /= norm);
    let [w, x, y, z] = q;
    let r = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ];
    let t: Point = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
    move |p: &Point| {
        let mut out = t;
        for (row, o) in r.iter().zip(out.iter_mut()) {
            *o += row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
        }
        out
    }
}

/// `max |a - n| / max(|a|, |n|, floor)` over paired analytic/numeric values.
pub fn max_rel_err(pairs: &[(f64, f64)], floor: f64) -> f64 {
    pairs
        .iter()
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
