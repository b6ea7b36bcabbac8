//! Input transformations applied before classification: random sampling,
//! statistical outlier removal, upsampling, and their composition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geom::{self, Point};
use crate::knn::NeighborIndex;
use crate::upsampler::{self, UpsamplerParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SorConfig {
    pub k: usize,
    pub alpha: f64,
}

impl Default for SorConfig {
    fn default() -> Self {
        Self { k: 2, alpha: 1.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenseOutcome {
    pub cloud: PointCloud,
    /// Indices into the input cloud, ascending.
    pub removed: Vec<usize>,
    pub added: usize,
}

/// Drops `r` points chosen uniformly without replacement; survivors keep
/// their order.
pub fn srs(cloud: &PointCloud, r: usize, seed: u64) -> Result<DefenseOutcome> {
    let n = cloud.len();
    if r >= n {
        return Err(Error::param(format!("cannot randomly drop {r} of {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut removed = rand::seq::index::sample(&mut rng, n, r).into_vec();
    removed.sort_unstable();
    Ok(DefenseOutcome {
        cloud: cloud.without(&removed)?,
        removed,
        added: 0,
    })
}

/// Mean distance from every point to its `min(k, n-1)` nearest neighbors.
pub fn mean_knn_distances(cloud: &PointCloud, k: usize) -> Vec<f64> {
    let index = NeighborIndex::build(cloud);
    (0..cloud.len())
        .map(|i| {
            let nn = index.query_with_distances(i, k);
            nn.iter().map(|(d, _)| d).sum::<f64>() / nn.len() as f64
        })
        .collect()
}

/// Statistical outlier removal: keeps points whose mean kNN distance is below
/// `mean + alpha * std` (population std over all points). If that would
/// remove every point, the input is returned unchanged.
pub fn sor(cloud: &PointCloud, cfg: &SorConfig) -> Result<DefenseOutcome> {
    let n = cloud.len();
    if n < 2 {
        return Err(Error::contract("outlier removal needs at least two points"));
    }
    if cfg.k == 0 {
        return Err(Error::param("SOR neighbor count k must be >= 1"));
    }
    if !(cfg.alpha >= 0.0) {
        return Err(Error::param("SOR alpha must be >= 0"));
    }
    let d = mean_knn_distances(cloud, cfg.k);
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let threshold = mean + cfg.alpha * var.sqrt();
    let removed: Vec<usize> = (0..n).filter(|&i| !(d[i] < threshold)).collect();
    if removed.len() == n {
        return Ok(DefenseOutcome {
            cloud: cloud.clone(),
            removed: Vec::new(),
            added: 0,
        });
    }
    Ok(DefenseOutcome {
        cloud: cloud.without(&removed)?,
        removed,
        added: 0,
    })
}

/// Neighbors per point whose connecting edges are midpoint candidates.
pub const MIDPOINT_NEIGHBORS: usize = 8;

/// Non-learned upsampling to `rate * n` points: the originals plus midpoints
/// of kNN-graph edges, picked farthest-first from the growing set. When the
/// edges run out they are reused at positions closer to one endpoint.
pub fn midpoint_upsample(cloud: &PointCloud, rate: usize) -> Result<PointCloud> {
    let n = cloud.len();
    if n < 2 {
        return Err(Error::contract("midpoint upsampling needs at least two points"));
    }
    if rate < 2 {
        return Err(Error::param("upsampling rate must be >= 2"));
    }
    let pts = cloud.points();
    let index = NeighborIndex::build(cloud);
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for j in index.query(i, MIDPOINT_NEIGHBORS) {
            edges.push((i.min(j), i.max(j)));
        }
    }
    edges.sort_unstable();
    edges.dedup();

    let needed = (rate - 1) * n;
    let mut out: Vec<Point> = pts.to_vec();
    out.reserve(needed);
    let mut pass = 0u32;
    while out.len() < n + needed {
        // position along the edge: 1/2 on the first pass, then 1/4, 1/8, ... from
        // the smaller-index endpoint
        let t = 0.5f64.powi(pass as i32 + 1);
        let cands: Vec<Point> = edges
            .iter()
            .map(|&(a, b)| {
                let (pa, pb) = (&pts[a], &pts[b]);
                geom::add(pa, &geom::scale(&geom::sub(pb, pa), t))
            })
            .collect();
        let mut gap: Vec<f64> = cands
            .iter()
            .map(|c| index.nearest(c).map_or(f64::INFINITY, |(_, d)| d * d))
            .collect();
        // points already added in earlier passes also count as occupied
        for c in cands.iter().enumerate() {
            for q in &out[n..] {
                let d2 = geom::dist2(c.1, q);
                if d2 < gap[c.0] {
                    gap[c.0] = d2;
                }
            }
        }
        let mut taken = vec![false; cands.len()];
        let want = (n + needed - out.len()).min(cands.len());
        for _ in 0..want {
            let mut best: Option<usize> = None;
            for (e, &g) in gap.iter().enumerate() {
                if !taken[e] && best.map_or(true, |b| g > gap[b]) {
                    best = Some(e);
                }
            }
            let e = best.expect("candidate available");
            taken[e] = true;
            let p = cands[e];
            out.push(p);
            for (f, g) in gap.iter_mut().enumerate() {
                if !taken[f] {
                    let d2 = geom::dist2(&cands[f], &p);
                    if d2 < *g {
                        *g = d2;
                    }
                }
            }
        }
        pass += 1;
    }
    PointCloud::new(out)
}

#[derive(Debug, Clone, Copy)]
pub enum Upsampler<'a> {
    Midpoint { rate: usize },
    Learned(&'a UpsamplerParams),
}

impl Upsampler<'_> {
    pub fn rate(&self) -> usize {
        match self {
            Upsampler::Midpoint { rate } => *rate,
            Upsampler::Learned(p) => p.rate,
        }
    }

    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        match self {
            Upsampler::Midpoint { rate } => midpoint_upsample(cloud, *rate),
            Upsampler::Learned(p) => upsampler::up_forward(p, cloud),
        }
    }
}

/// Outlier removal followed by upsampling. The keep/drop decision of SOR is a
/// hard threshold, so no gradient path links the output back to the input
/// point count.
pub fn dup_pipeline(cloud: &PointCloud, sor_cfg: &SorConfig, up: Upsampler<'_>) -> Result<PointCloud> {
    let denoised = sor(cloud, sor_cfg)?;
    up.apply(&denoised.cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pc(p: Vec<Point>) -> PointCloud {
        PointCloud::new(p).unwrap()
    }

    #[test]
    fn srs_cardinality_and_identity() {
        let c = pc((0..1024).map(|i| [i as f64, 0.0, 0.0]).collect());
        let out = srs(&c, 500, 3).unwrap();
        assert_eq!(out.cloud.len(), 524);
        assert_eq!(out.removed.len(), 500);
        assert_eq!(srs(&c, 0, 3).unwrap().cloud, c);
        assert!(matches!(srs(&c, 1024, 3), Err(Error::Parameter(_))));
        assert_eq!(srs(&c, 10, 8).unwrap(), srs(&c, 10, 8).unwrap());
    }

    #[test]
    fn sor_square_plus_far_point() {
        let c = pc(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.5, 0.5, 10.0],
        ]);
        let out = sor(&c, &SorConfig { k: 2, alpha: 1.1 }).unwrap();
        assert_eq!(out.removed, vec![4]);
        assert_eq!(out.cloud.len(), 4);
    }

    #[test]
    fn sor_regular_cloud_unchanged() {
        let mut pts = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    pts.push([x, y, z]);
                }
            }
        }
        let c = pc(pts);
        let out = sor(&c, &SorConfig { k: 3, alpha: 1.1 }).unwrap();
        assert!(out.removed.is_empty());
        assert_eq!(out.cloud, c);
    }

    #[test]
    fn sor_rejects_bad_input() {
        let one = pc(vec![[0.0; 3]]);
        assert!(matches!(sor(&one, &SorConfig::default()), Err(Error::Contract(_))));
        let two = pc(vec![[0.0; 3], [1.0; 3]]);
        assert!(sor(&two, &SorConfig { k: 0, alpha: 1.0 }).is_err());
    }

    #[test]
    fn midpoint_two_points() {
        let c = pc(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        let up = midpoint_upsample(&c, 2).unwrap();
        assert_eq!(up.len(), 4);
        assert_eq!(&up.points()[..2], c.points());
        assert_eq!(up.point(2), &[0.5, 0.0, 0.0]);
        assert_eq!(up.point(3), &[0.25, 0.0, 0.0]);
    }

    #[test]
    fn midpoint_cardinality_and_locality() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (n, rate) in [(50, 2), (17, 4), (300, 3)] {
            let c = pc((0..n).map(|_| rng.gen()).collect());
            let up = midpoint_upsample(&c, rate).unwrap();
            assert_eq!(up.len(), rate * n);
            assert_eq!(&up.points()[..n], c.points());
            let index = NeighborIndex::build(&c);
            let max_edge = (0..n)
                .flat_map(|i| index.query_with_distances(i, MIDPOINT_NEIGHBORS))
                .map(|(d, _)| d)
                .fold(0.0, f64::max);
            for p in &up.points()[n..] {
                let (_, d) = index.nearest(p).unwrap();
                assert!(d <= max_edge / 2.0 + 1e-12);
            }
        }
    }
}
