//! Learned patch-based point upsampler.
//!
//! For every input point the network encodes the offsets to its `neighbors`
//! nearest neighbors (shared MLP 3 -> 32 -> 64, ReLU, max-pooled over the
//! neighbors), expands the pooled feature through `rate` independent branches
//! (64 -> 64, ReLU) and regresses a residual offset per branch (64 -> 32 -> 3).
//! Offsets are expressed in units of the point's mean neighbor distance, so
//! the same weights apply to small normalized patches and to whole clouds.
//! The last regression layer starts at zero, so an untrained network emits
//! `rate` copies of each input point.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::checkpoint::Checkpoint;
use crate::classifier::{relu_inplace, relu_mask_inplace, Dense};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geom::{self, Point};
use crate::knn::NeighborIndex;
use crate::metrics;

pub const CHECKPOINT_FORMAT: &str = "dupnet-upsampler";
pub const ENCODER_WIDTHS: [usize; 3] = [3, 32, 64];
pub const HEAD_HIDDEN: usize = 32;
pub const DEFAULT_NEIGHBORS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct UpsamplerParams {
    pub encoder: [Dense; 2],
    /// One expansion layer per offspring.
    pub branches: Vec<Dense>,
    /// Shared regression head; `head[1]` outputs the residual offset.
    pub head: [Dense; 2],
    pub rate: usize,
    pub neighbors: usize,
}

impl UpsamplerParams {
    pub fn init(rate: usize, neighbors: usize, seed: u64) -> Result<Self> {
        if rate < 2 {
            return Err(Error::param("upsampling rate must be >= 2"));
        }
        if neighbors == 0 {
            return Err(Error::param("encoder neighbor count must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w0, w1, w2] = ENCODER_WIDTHS;
        let encoder = [
            Dense::he_normal(w0, w1, 2.0, &mut rng),
            Dense::he_normal(w1, w2, 2.0, &mut rng),
        ];
        let branches = (0..rate)
            .map(|_| Dense::he_normal(w2, w2, 2.0, &mut rng))
            .collect();
        let head = [
            Dense::he_normal(w2, HEAD_HIDDEN, 2.0, &mut rng),
            Dense::zeros(HEAD_HIDDEN, 3),
        ];
        Ok(Self {
            encoder,
            branches,
            head,
            rate,
            neighbors,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.input_dim(), d.output_dim());
        Self {
            encoder: [z(&self.encoder[0]), z(&self.encoder[1])],
            branches: self.branches.iter().map(z).collect(),
            head: [z(&self.head[0]), z(&self.head[1])],
            rate: self.rate,
            neighbors: self.neighbors,
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder
            .iter()
            .chain(self.branches.iter())
            .chain(self.head.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder
            .iter_mut()
            .chain(self.branches.iter_mut())
            .chain(self.head.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut it = flat.iter();
        for l in self.layers_mut() {
            l.w.iter_mut().for_each(|v| *v = *it.next().unwrap());
            l.b.iter_mut().for_each(|v| *v = *it.next().unwrap());
        }
    }

    /// Sum of squares of every weight and bias.
    pub fn squared_norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rate < 2 || self.branches.len() != self.rate {
            return Err(Error::contract("upsampler needs rate >= 2 branches"));
        }
        let [w0, w1, w2] = ENCODER_WIDTHS;
        let shapes_ok = self.encoder[0].w.dim() == (w0, w1)
            && self.encoder[1].w.dim() == (w1, w2)
            && self.branches.iter().all(|b| b.w.dim() == (w2, w2))
            && self.head[0].w.dim() == (w2, HEAD_HIDDEN)
            && self.head[1].w.dim() == (HEAD_HIDDEN, 3)
            && self.layers().all(|l| l.b.len() == l.output_dim());
        if !shapes_ok {
            return Err(Error::contract("upsampler layer shapes do not chain"));
        }
        if self.flatten().iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("upsampler parameters must be finite"));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_FORMAT);
        ck.meta.insert("rate".into(), self.rate.into());
        ck.meta.insert("neighbors".into(), self.neighbors.into());
        let mut push = |name: String, l: &Dense| {
            ck.push_matrix(format!("{name}.w"), &l.w);
            ck.push_vector(format!("{name}.b"), &l.b);
        };
        for (i, l) in self.encoder.iter().enumerate() {
            push(format!("encoder{i}"), l);
        }
        for (i, l) in self.branches.iter().enumerate() {
            push(format!("branch{i}"), l);
        }
        for (i, l) in self.head.iter().enumerate() {
            push(format!("head{i}"), l);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_format(CHECKPOINT_FORMAT)?;
        let rate = ck.meta_usize("rate")?;
        let neighbors = ck.meta_usize("neighbors")?;
        let layer = |name: String| -> Result<Dense> {
            Ok(Dense {
                w: ck.matrix(&format!("{name}.w"))?,
                b: ck.vector(&format!("{name}.b"))?,
            })
        };
        let params = Self {
            encoder: [layer("encoder0".into())?, layer("encoder1".into())?],
            branches: (0..rate)
                .map(|i| layer(format!("branch{i}")))
                .collect::<Result<_>>()?,
            head: [layer("head0".into())?, layer("head1".into())?],
            rate,
            neighbors,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Per-point intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
struct PointTrace {
    scale: f64,
    edges: Array2<f64>,
    z1: Array2<f64>,
    z2: Array2<f64>,
    feature: Array1<f64>,
    argmax: Vec<usize>,
    /// Per branch: expansion pre-activation, head hidden pre-activation.
    branch: Vec<(Array1<f64>, Array1<f64>)>,
}

#[derive(Debug, Clone)]
pub struct UpTrace {
    points: Vec<PointTrace>,
    pub output: Vec<Point>,
}

/// Neighborhood offsets of point `i` scaled by its mean neighbor distance.
fn neighborhood(index: &NeighborIndex, i: usize, k: usize) -> (f64, Array2<f64>) {
    let nn = index.query_with_distances(i, k);
    let pts = index.points();
    if nn.is_empty() {
        return (1.0, Array2::zeros((1, 3)));
    }
    let mean = nn.iter().map(|(d, _)| d).sum::<f64>() / nn.len() as f64;
    let scale = if mean > 0.0 { mean } else { 1.0 };
    let edges = Array2::from_shape_fn((nn.len(), 3), |(r, a)| {
        (pts[nn[r].1][a] - pts[i][a]) / scale
    });
    (scale, edges)
}

fn forward_traced(params: &UpsamplerParams, points: &[Point]) -> UpTrace {
    let index = NeighborIndex::from_points(points);
    let rate = params.rate;
    let mut traces = Vec::with_capacity(points.len());
    let mut output = Vec::with_capacity(points.len() * rate);
    for (i, p) in points.iter().enumerate() {
        let (scale, edges) = neighborhood(&index, i, params.neighbors);
        let z1 = params.encoder[0].apply_rows(edges.view());
        let mut a1 = z1.clone();
        relu_inplace(&mut a1);
        let z2 = params.encoder[1].apply_rows(a1.view());
        let width = z2.ncols();
        let mut feature = Array1::from_elem(width, f64::NEG_INFINITY);
        let mut argmax = vec![0usize; width];
        for (r, row) in z2.outer_iter().enumerate() {
            for (d, &z) in row.iter().enumerate() {
                let a = z.max(0.0);
                if a > feature[d] {
                    feature[d] = a;
                    argmax[d] = r;
                }
            }
        }
        let mut branch = Vec::with_capacity(rate);
        for b in &params.branches {
            let zg = b.apply_vec(&feature);
            let g = zg.mapv(|v| v.max(0.0));
            let zu = params.head[0].apply_vec(&g);
            let u = zu.mapv(|v| v.max(0.0));
            let o = params.head[1].apply_vec(&u);
            output.push([p[0] + scale * o[0], p[1] + scale * o[1], p[2] + scale * o[2]]);
            branch.push((zg, zu));
        }
        traces.push(PointTrace {
            scale,
            edges,
            z1,
            z2,
            feature,
            argmax,
            branch,
        });
    }
    UpTrace {
        points: traces,
        output,
    }
}

/// Upsamples `cloud` to `rate * n` points. Offspring of input point `i` occupy
/// output indices `i * rate .. (i + 1) * rate`.
pub fn up_forward(params: &UpsamplerParams, cloud: &PointCloud) -> Result<PointCloud> {
    PointCloud::new(forward_traced(params, cloud.points()).output)
        .map_err(|_| Error::Numerical("upsampler produced non-finite points".into()))
}

/// Parameter gradients given the gradient with respect to the output points.
fn backward(params: &UpsamplerParams, trace: &UpTrace, d_out: &[Point]) -> UpsamplerParams {
    let rate = params.rate;
    let mut g = params.zeros_like();
    for (i, pt) in trace.points.iter().enumerate() {
        let mut d_feature = Array1::<f64>::zeros(pt.feature.len());
        for (r, (zg, zu)) in pt.branch.iter().enumerate() {
            let dy = d_out[i * rate + r];
            if dy == [0.0; 3] {
                continue;
            }
            let d_o = Array1::from(vec![dy[0] * pt.scale, dy[1] * pt.scale, dy[2] * pt.scale]);
            let u = zu.mapv(|v| v.max(0.0));
            add_outer(&mut g.head[1].w, &u, &d_o);
            g.head[1].b += &d_o;
            let mut d_zu = params.head[1].w.dot(&d_o);
            d_zu.zip_mut_with(zu, |d, &z| {
                if z <= 0.0 {
                    *d = 0.0
                }
            });
            let gact = zg.mapv(|v| v.max(0.0));
            add_outer(&mut g.head[0].w, &gact, &d_zu);
            g.head[0].b += &d_zu;
            let mut d_zg = params.head[0].w.dot(&d_zu);
            d_zg.zip_mut_with(zg, |d, &z| {
                if z <= 0.0 {
                    *d = 0.0
                }
            });
            add_outer(&mut g.branches[r].w, &pt.feature, &d_zg);
            g.branches[r].b += &d_zg;
            d_feature += &params.branches[r].w.dot(&d_zg);
        }
        if d_feature.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mut dz2 = Array2::<f64>::zeros(pt.z2.dim());
        for (d, &r) in pt.argmax.iter().enumerate() {
            dz2[[r, d]] += d_feature[d];
        }
        relu_mask_inplace(&mut dz2, pt.z2.view());
        let mut a1 = pt.z1.clone();
        relu_inplace(&mut a1);
        g.encoder[1].w += &a1.t().dot(&dz2);
        g.encoder[1].b += &dz2.sum_axis(Axis(0));
        let mut dz1 = dz2.dot(&params.encoder[1].w.t());
        relu_mask_inplace(&mut dz1, pt.z1.view());
        g.encoder[0].w += &pt.edges.t().dot(&dz1);
        g.encoder[0].b += &dz1.sum_axis(Axis(0));
    }
    g
}

fn add_outer(m: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        for (j, &bj) in b.iter().enumerate() {
            m[[i, j]] += ai * bj;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecMode {
    /// Exact Earth Mover's distance; output and target sizes must match.
    Emd,
    /// Mean squared distance from each output point to the target set.
    OneSidedChamfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpsampleLossConfig {
    pub beta: f64,
    pub gamma: f64,
    pub rec_mode: RecMode,
    pub k_rep: usize,
    pub h: f64,
}

impl Default for UpsampleLossConfig {
    fn default() -> Self {
        Self {
            beta: 0.01,
            gamma: 1e-5,
            rec_mode: RecMode::Emd,
            k_rep: 5,
            h: 0.3,
        }
    }
}

impl UpsampleLossConfig {
    fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::param("beta and gamma must be >= 0"));
        }
        if !(self.h > 0.0) {
            return Err(Error::param("repulsion bandwidth h must be > 0"));
        }
        Ok(())
    }
}

/// Discrete choices (matching, nearest targets, repulsion neighbors) that the
/// loss treats as locally constant. Holding a plan fixed makes the loss
/// smooth in the parameters, which finite-difference checks rely on.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPlan {
    /// Target index matched to each output point.
    pub targets: Vec<usize>,
    pub repulsion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub repulsion: f64,
    pub weight_decay: f64,
}

pub fn plan_loss(output: &[Point], target: &[Point], cfg: &UpsampleLossConfig) -> Result<LossPlan> {
    let targets = match cfg.rec_mode {
        RecMode::Emd => metrics::emd_matching(output, target)?.assignment,
        RecMode::OneSidedChamfer => {
            if target.is_empty() {
                return Err(Error::contract("empty target patch"));
            }
            let index = NeighborIndex::from_points(target);
            output
                .iter()
                .map(|p| index.nearest(p).expect("nonempty").0)
                .collect()
        }
    };
    let index = NeighborIndex::from_points(output);
    let repulsion = (0..output.len()).map(|i| index.query(i, cfg.k_rep)).collect();
    Ok(LossPlan { targets, repulsion })
}

/// Repulsion energy `sum_i sum_{j in knn(i)} -d_ij * exp(-d_ij^2 / h^2)`.
pub fn repulsion(output: &[Point], neighbors: &[Vec<usize>], h: f64) -> f64 {
    let h2 = h * h;
    neighbors
        .iter()
        .enumerate()
        .flat_map(|(i, nn)| nn.iter().map(move |&j| (i, j)))
        .map(|(i, j)| {
            let d = geom::dist(&output[i], &output[j]);
            -d * (-d * d / h2).exp()
        })
        .sum()
}

/// Composite upsampling loss `L_rec + beta * L_rep + gamma * |theta|^2` and its
/// parameter gradient. Pass a `plan` to freeze the matching and repulsion
/// neighborhoods; otherwise they are computed from the current output.
pub fn total_loss(
    params: &UpsamplerParams,
    input: &PointCloud,
    target: &PointCloud,
    cfg: &UpsampleLossConfig,
    plan: Option<&LossPlan>,
) -> Result<(LossBreakdown, UpsamplerParams)> {
    cfg.validate()?;
    let trace = forward_traced(params, input.points());
    let out = &trace.output;
    let tgt = target.points();
    let fresh;
    let plan = match plan {
        Some(p) => p,
        None => {
            fresh = plan_loss(out, tgt, cfg)?;
            &fresh
        }
    };
    if plan.targets.len() != out.len() || plan.repulsion.len() != out.len() {
        return Err(Error::contract("loss plan does not match the output size"));
    }
    let n_out = out.len() as f64;
    let mut d_out = vec![[0.0; 3]; out.len()];

    let mut rec = 0.0;
    for (i, (y, &t)) in out.iter().zip(&plan.targets).enumerate() {
        let diff = geom::sub(y, &tgt[t]);
        match cfg.rec_mode {
            RecMode::Emd => {
                let d = geom::norm(&diff);
                rec += d;
                if d > 0.0 {
                    d_out[i] = geom::scale(&diff, 1.0 / (d * n_out));
                }
            }
            RecMode::OneSidedChamfer => {
                rec += geom::dot(&diff, &diff);
                d_out[i] = geom::scale(&diff, 2.0 / n_out);
            }
        }
    }
    rec /= n_out;

    let h2 = cfg.h * cfg.h;
    let mut rep = 0.0;
    for (i, nn) in plan.repulsion.iter().enumerate() {
        for &j in nn {
            let diff = geom::sub(&out[i], &out[j]);
            let d = geom::norm(&diff);
            let e = (-d * d / h2).exp();
            rep += -d * e;
            if d > 0.0 && cfg.beta > 0.0 {
                // d/dd of -d e^{-d^2/h^2}
                let dphi = -e * (1.0 - 2.0 * d * d / h2);
                let gi = geom::scale(&diff, cfg.beta * dphi / d);
                d_out[i] = geom::add(&d_out[i], &gi);
                d_out[j] = geom::sub(&d_out[j], &gi);
            }
        }
    }

    let mut grads = backward(params, &trace, &d_out);
    let wd = params.squared_norm();
    if cfg.gamma > 0.0 {
        for (g, p) in grads.layers_mut().zip(params.layers()) {
            g.w.scaled_add(2.0 * cfg.gamma, &p.w);
            g.b.scaled_add(2.0 * cfg.gamma, &p.b);
        }
    }
    let breakdown = LossBreakdown {
        total: rec + cfg.beta * rep + cfg.gamma * wd,
        reconstruction: rec,
        repulsion: rep,
        weight_decay: wd,
    };
    Ok((breakdown, grads))
}

/// A sparse input patch and the dense patch it was drawn from, both in the
/// same patch-local frame (dense centroid at the origin, max radius 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub input: PointCloud,
    pub target: PointCloud,
}

/// Cuts `patches_per_cloud` patches from a dense cloud: each target is the
/// `rate * patch_size` nearest points around a random seed point and each
/// input a random `patch_size` subset of its target.
pub fn extract_patches(
    dense: &PointCloud,
    patch_size: usize,
    rate: usize,
    patches_per_cloud: usize,
    seed: u64,
) -> Result<Vec<Patch>> {
    if patch_size == 0 || rate < 2 {
        return Err(Error::param("patch size must be >= 1 and rate >= 2"));
    }
    let target_size = patch_size * rate;
    if dense.len() < target_size {
        return Err(Error::contract(format!(
            "cloud of {} points is too small for patches of {target_size}",
            dense.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = NeighborIndex::build(dense);
    let count = patches_per_cloud.min(dense.len());
    let seeds = rand::seq::index::sample(&mut rng, dense.len(), count).into_vec();
    let mut out = Vec::with_capacity(count);
    for s in seeds {
        let members = index.query_point(dense.point(s), target_size);
        let target: Vec<Point> = members.iter().map(|&j| *dense.point(j)).collect();
        let c = geom::centroid(&target);
        let radius = target.iter().map(|p| geom::dist(p, &c)).fold(0.0, f64::max);
        let inv = if radius > 0.0 { 1.0 / radius } else { 1.0 };
        let local = |p: &Point| geom::scale(&geom::sub(p, &c), inv);
        let mut pick = rand::seq::index::sample(&mut rng, target_size, patch_size).into_vec();
        pick.sort_unstable();
        let input: Vec<Point> = pick.iter().map(|&j| local(&target[j])).collect();
        let target: Vec<Point> = target.iter().map(local).collect();
        out.push(Patch {
            input: PointCloud::new(input)?,
            target: PointCloud::new(target)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpsamplerTrainConfig {
    pub rate: usize,
    pub neighbors: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: UpsampleLossConfig,
}

impl Default for UpsamplerTrainConfig {
    fn default() -> Self {
        Self {
            rate: 4,
            neighbors: DEFAULT_NEIGHBORS,
            epochs: 16,
            batch_size: 16,
            learning_rate: 0.003,
            seed: 1,
            loss: UpsampleLossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpsamplerEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_reconstruction: f64,
    pub validation_reconstruction: Option<f64>,
}

/// Mean reconstruction term over patches.
pub fn mean_reconstruction(params: &UpsamplerParams, patches: &[Patch], mode: RecMode) -> Result<f64> {
    if patches.is_empty() {
        return Err(Error::contract("no patches to evaluate"));
    }
    let vals: Vec<Result<f64>> = patches
        .par_iter()
        .map(|p| {
            let out = up_forward(params, &p.input)?;
            match mode {
                RecMode::Emd => metrics::emd(out.points(), p.target.points()),
                RecMode::OneSidedChamfer => metrics::one_sided_chamfer(p.target.points(), out.points()),
            }
        })
        .collect();
    let mut sum = 0.0;
    for v in vals {
        sum += v?;
    }
    Ok(sum / patches.len() as f64)
}

/// Trains with Adam on minibatch-averaged composite loss.
pub fn train_upsampler(
    patches: &[Patch],
    validation: Option<&[Patch]>,
    cfg: &UpsamplerTrainConfig,
    mut on_epoch: impl FnMut(&UpsamplerEpoch),
) -> Result<(UpsamplerParams, Vec<UpsamplerEpoch>)> {
    if patches.is_empty() {
        return Err(Error::contract("upsampler training set is empty"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::param("epochs, batch size and learning rate must be positive"));
    }
    cfg.loss.validate()?;
    if let Some(p) = patches
        .iter()
        .find(|p| p.target.len() != p.input.len() * cfg.rate)
    {
        return Err(Error::contract(format!(
            "patch sizes {}/{} do not match rate {}",
            p.input.len(),
            p.target.len(),
            cfg.rate
        )));
    }
    let mut params = UpsamplerParams::init(cfg.rate, cfg.neighbors, cfg.seed)?;
    let mut flat = params.flatten();
    let mut opt = Adam::new(flat.len(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0u64.wrapping_sub(1));
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut rec_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(LossBreakdown, Vec<f64>)>> = batch
                .par_iter()
                .map(|&i| {
                    let p = &patches[i];
                    let (b, g) = total_loss(&params, &p.input, &p.target, &cfg.loss, None)?;
                    Ok((b, g.flatten()))
                })
                .collect();
            let mut grad = vec![0.0; flat.len()];
            for r in results {
                let (b, g) = r?;
                loss_sum += b.total;
                rec_sum += b.reconstruction;
                grad.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|v| *v *= scale);
            opt.step(&mut flat, &grad);
            params.assign_flat(&flat);
        }
        if !loss_sum.is_finite() {
            return Err(Error::Numerical(format!("upsampler loss diverged in epoch {epoch}")));
        }
        let stats = UpsamplerEpoch {
            epoch,
            train_loss: loss_sum / patches.len() as f64,
            train_reconstruction: rec_sum / patches.len() as f64,
            validation_reconstruction: match validation {
                Some(v) => Some(mean_reconstruction(&params, v, cfg.loss.rec_mode)?),
                None => None,
            },
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((params, history))
}
