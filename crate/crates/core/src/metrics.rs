//! Point-set distances and adversarial-point bookkeeping.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geom::{self, Point};

/// Per-point displacement between index-aligned clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedL2 {
    pub per_point: Vec<f64>,
    /// l2 norm of the full stacked perturbation vector.
    pub total: f64,
}

pub fn paired_l2(x: &PointCloud, x_adv: &PointCloud) -> Result<PairedL2> {
    paired_l2_points(x.points(), x_adv.points())
}

pub fn paired_l2_points(x: &[Point], x_adv: &[Point]) -> Result<PairedL2> {
    if x.len() != x_adv.len() {
        return Err(Error::contract(format!(
            "paired l2 needs equal sizes, got {} and {}",
            x.len(),
            x_adv.len()
        )));
    }
    let mut sum = 0.0;
    let per_point = x
        .iter()
        .zip(x_adv)
        .map(|(a, b)| {
            let d2 = geom::dist2(a, b);
            sum += d2;
            d2.sqrt()
        })
        .collect();
    Ok(PairedL2 {
        per_point,
        total: sum.sqrt(),
    })
}

/// `min_{m in set} |m - p|`.
pub fn point_to_set(p: &Point, set: &[Point]) -> f64 {
    min_dist2(p, set).sqrt()
}

fn min_dist2(p: &Point, set: &[Point]) -> f64 {
    set.iter()
        .map(|m| geom::dist2(p, m))
        .fold(f64::INFINITY, f64::min)
}

fn check_nonempty(a: &[Point], b: &[Point]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("point-set distance of an empty set"));
    }
    Ok(())
}

/// `max_{a in from} min_{b in to} |a - b|`.
pub fn hausdorff_directed(from: &[Point], to: &[Point]) -> Result<f64> {
    check_nonempty(from, to)?;
    Ok(from
        .iter()
        .map(|a| min_dist2(a, to))
        .fold(0.0, f64::max)
        .sqrt())
}

/// Symmetric Chamfer distance: the two directed means of squared
/// nearest-neighbor distances, averaged.
pub fn chamfer(x: &[Point], y: &[Point]) -> Result<f64> {
    check_nonempty(x, y)?;
    let forward: f64 = x.iter().map(|p| min_dist2(p, y)).sum::<f64>() / x.len() as f64;
    let backward: f64 = y.iter().map(|p| min_dist2(p, x)).sum::<f64>() / y.len() as f64;
    Ok(0.5 * (forward + backward))
}

/// Mean over `generated` of the squared distance to the nearest point of
/// `reference`. Only the generated side is averaged.
pub fn one_sided_chamfer(reference: &[Point], generated: &[Point]) -> Result<f64> {
    check_nonempty(reference, generated)?;
    Ok(generated
        .iter()
        .map(|p| min_dist2(p, reference))
        .sum::<f64>()
        / generated.len() as f64)
}

/// Optimal one-to-one matching between equal-size sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `assignment[i]` is the index in the second set matched to point `i` of the first.
    pub assignment: Vec<usize>,
    /// Total Euclidean cost divided by the number of points.
    pub mean_cost: f64,
}

/// Exact Earth Mover's distance between equal-size sets with Euclidean ground
/// cost, averaged per point.
pub fn emd(x: &[Point], y: &[Point]) -> Result<f64> {
    emd_matching(x, y).map(|m| m.mean_cost)
}

pub fn emd_matching(x: &[Point], y: &[Point]) -> Result<Matching> {
    if x.len() != y.len() {
        return Err(Error::contract(format!(
            "EMD needs equal sizes, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    check_nonempty(x, y)?;
    let n = x.len();
    let mut cost = vec![0.0; n * n];
    for (i, a) in x.iter().enumerate() {
        for (j, b) in y.iter().enumerate() {
            cost[i * n + j] = geom::dist(a, b);
        }
    }
    let assignment = solve_assignment(&cost, n);
    // Sum from the matched pairs rather than the dual so the value is exact.
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Ok(Matching {
        assignment,
        mean_cost: total / n as f64,
    })
}

/// Minimum-cost perfect matching on a dense `n x n` cost matrix (row-major),
/// Hungarian method with potentials, O(n^3). Returns the column of each row.
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based arrays; column 0 is a sentinel.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            let crow = &cost[(i0 - 1) * n..i0 * n];
            for j in 1..=n {
                if !used[j] {
                    let cur = crow[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvMode {
    /// Displacement of each point from its index-aligned original.
    PairedL2,
    /// Distance from each adversarial point to the nearest clean point.
    SetDistance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvPointReport {
    /// Indices into the adversarial cloud, ascending.
    pub adv_indices: Vec<usize>,
    pub threshold: f64,
    pub epsilon: f64,
    pub mode: AdvMode,
}

/// Flags the adversarial points of `x_adv` relative to the clean cloud `x`.
///
/// Scores are per-point displacements (`PairedL2`) or point-to-set distances
/// (`SetDistance`). The threshold is the order statistic that leaves
/// `round(epsilon * n)` scores above it; points scoring strictly above it are
/// flagged, so ties at the threshold are excluded.
pub fn identify_adv_points(
    x: &PointCloud,
    x_adv: &PointCloud,
    epsilon: f64,
    mode: AdvMode,
) -> Result<AdvPointReport> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::param(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let scores = match mode {
        AdvMode::PairedL2 => paired_l2(x, x_adv)?.per_point,
        AdvMode::SetDistance => x_adv
            .points()
            .iter()
            .map(|p| point_to_set(p, x.points()))
            .collect(),
    };
    let threshold = upper_quantile_threshold(&scores, epsilon);
    let adv_indices = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(i, _)| i)
        .collect();
    Ok(AdvPointReport {
        adv_indices,
        threshold,
        epsilon,
        mode,
    })
}

/// The `(1 - epsilon)` empirical quantile: the `(n - m)`-th smallest score
/// with `m = round(epsilon * n)`.
fn upper_quantile_threshold(scores: &[f64], epsilon: f64) -> f64 {
    let n = scores.len();
    let m = ((epsilon * n as f64).round() as usize).min(n);
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    if m == 0 {
        sorted[n - 1]
    } else if m == n {
        f64::NEG_INFINITY
    } else {
        sorted[n - m - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemovalRatio {
    pub p: f64,
    pub removed_count: usize,
    pub removed_adv_count: usize,
}

/// Outcome of scoring a defense's removed set against the adversarial points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RemovalOutcome {
    Ratio(RemovalRatio),
    /// The defense removed nothing; the ratio is 0/0.
    NoPointsRemoved,
}

impl RemovalOutcome {
    pub fn ratio(&self) -> Option<f64> {
        match self {
            RemovalOutcome::Ratio(r) => Some(r.p),
            RemovalOutcome::NoPointsRemoved => None,
        }
    }
}

/// Fraction of the points removed from `x_adv` by a defense that are flagged
/// adversarial in `report`.
pub fn removal_ratio(
    x_adv: &PointCloud,
    removed: &[usize],
    report: &AdvPointReport,
) -> Result<RemovalOutcome> {
    if let Some(&bad) = removed.iter().find(|&&i| i >= x_adv.len()) {
        return Err(Error::contract(format!(
            "removed index {bad} out of range for a cloud of {} points",
            x_adv.len()
        )));
    }
    let removed: HashSet<usize> = removed.iter().copied().collect();
    if removed.is_empty() {
        return Ok(RemovalOutcome::NoPointsRemoved);
    }
    let hits = report
        .adv_indices
        .iter()
        .filter(|i| removed.contains(i))
        .count();
    Ok(RemovalOutcome::Ratio(RemovalRatio {
        p: hits as f64 / removed.len() as f64,
        removed_count: removed.len(),
        removed_adv_count: hits,
    }))
}
