//! White-box attacks on the point-set classifier: C&W point shifting and point
//! adding, and saliency-guided iterative point dropping.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::classifier::{self, ClassifierParams, ForwardTrace, IncrementalForward};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geom::{self, Point};
use crate::knn::NeighborIndex;
use crate::metrics;

/// C&W margin: `max(Z_true - max_{i != true} Z_i, -kappa)` untargeted, or
/// `max(max_{i != t} Z_i - Z_t, -kappa)` towards target `t`.
pub fn margin_loss(
    logits: &[f64],
    true_label: usize,
    kappa: f64,
    target: Option<usize>,
) -> Result<f64> {
    margin_loss_grad(logits, true_label, kappa, target).map(|(v, _)| v)
}

/// Margin value together with its gradient with respect to the logits.
pub fn margin_loss_grad(
    logits: &[f64],
    true_label: usize,
    kappa: f64,
    target: Option<usize>,
) -> Result<(f64, Vec<f64>)> {
    let c = logits.len();
    if c < 2 {
        return Err(Error::contract("margin loss needs at least two classes"));
    }
    if true_label >= c {
        return Err(Error::contract(format!("label {true_label} out of range")));
    }
    if kappa < 0.0 {
        return Err(Error::param("kappa must be >= 0"));
    }
    let best_other = |skip: usize| {
        let mut best: Option<usize> = None;
        for i in (0..c).filter(|&i| i != skip) {
            if best.map_or(true, |b| logits[i] > logits[b]) {
                best = Some(i);
            }
        }
        best.expect("c >= 2")
    };
    let (anchor, rival, sign) = match target {
        None => (true_label, best_other(true_label), 1.0),
        Some(t) => {
            if t == true_label {
                return Err(Error::param("target label equals the true label"));
            }
            if t >= c {
                return Err(Error::contract(format!("target {t} out of range")));
            }
            (t, best_other(t), -1.0)
        }
    };
    let raw = sign * (logits[anchor] - logits[rival]);
    let mut grad = vec![0.0; c];
    if raw > -kappa {
        grad[anchor] = sign;
        grad[rival] = -sign;
        Ok((raw, grad))
    } else {
        Ok((-kappa, grad))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CwConfig {
    /// Weight of the margin term; the starting point of the binary search.
    pub c: f64,
    pub kappa: f64,
    pub steps: usize,
    pub step_size: f64,
    pub target: Option<usize>,
    /// Rounds of geometric bisection over `c` within `c_range`.
    pub binary_search_rounds: usize,
    pub c_range: (f64, f64),
    /// Number of points to add (adding mode only).
    pub added_points: usize,
    pub seed: u64,
}

impl Default for CwConfig {
    fn default() -> Self {
        Self {
            c: 10.0,
            kappa: 0.0,
            steps: 200,
            step_size: 0.01,
            target: None,
            binary_search_rounds: 5,
            c_range: (0.1, 100.0),
            added_points: 64,
            seed: 0,
        }
    }
}

impl CwConfig {
    fn validate(&self) -> Result<()> {
        if self.c < 0.0 || !self.c.is_finite() {
            return Err(Error::param("c must be finite and >= 0"));
        }
        if self.kappa < 0.0 {
            return Err(Error::param("kappa must be >= 0"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::param("step size must be > 0"));
        }
        if self.binary_search_rounds == 0 {
            return Err(Error::param("at least one binary-search round is required"));
        }
        let (lo, hi) = self.c_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::param("c_range must satisfy 0 < lo <= hi"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetMetric {
    Hausdorff,
    Chamfer,
}

/// Which end of the saliency ranking is dropped each loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropOrder {
    /// Points whose removal is estimated to raise the loss most.
    Highest,
    Lowest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencyConfig {
    pub alpha: f64,
    pub loops: usize,
    pub total_drop: usize,
    pub order: DropOrder,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            loops: 10,
            total_drop: 200,
            order: DropOrder::Highest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub cloud: PointCloud,
    pub success: bool,
    /// Shifting: l2 norm of the whole perturbation. Adding: directed Hausdorff
    /// or one-sided Chamfer from the added points to the clean cloud.
    /// Dropping: number of dropped points.
    pub distortion: f64,
    pub predicted: usize,
    pub true_label: usize,
    pub target: Option<usize>,
    pub iterations: usize,
    /// The clean cloud was already misclassified and was returned unchanged.
    pub skipped: bool,
    /// Margin weight of the returned example, when an optimization ran.
    pub c: Option<f64>,
    /// Indices into the clean cloud of dropped points (dropping only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped: Vec<usize>,
}

fn is_success(pred: usize, label: usize, target: Option<usize>) -> bool {
    match target {
        Some(t) => pred == t,
        None => pred != label,
    }
}

struct Candidate {
    points: Vec<Point>,
    distortion: f64,
    predicted: usize,
    c: f64,
}

/// Shared C&W loop. `free` are the optimized coordinates, `assemble` builds the
/// classifier input from them, `distortion` returns the distance term and its
/// gradient, and `route` maps classifier input gradients back onto `free`.
struct CwProblem<'a> {
    params: &'a ClassifierParams,
    label: usize,
    cfg: &'a CwConfig,
}

impl CwProblem<'_> {
    fn run<A, D, R>(
        &self,
        start: &[Point],
        assemble: A,
        distortion: D,
        route: R,
    ) -> Result<(Option<Candidate>, usize)>
    where
        A: Fn(&[Point]) -> Vec<Point>,
        D: Fn(&[Point]) -> (f64, Vec<Point>),
        R: Fn(&[Point]) -> Vec<Point>,
    {
        let cfg = self.cfg;
        let (mut lo, mut hi) = cfg.c_range;
        let mut c = cfg.c.clamp(lo, hi);
        let mut best: Option<Candidate> = None;
        let mut iterations = 0;
        for _round in 0..cfg.binary_search_rounds {
            let mut free = start.to_vec();
            let mut flat: Vec<f64> = free.iter().flatten().copied().collect();
            let mut opt = Adam::new(flat.len(), cfg.step_size);
            let input = assemble(&free);
            let mut fwd = IncrementalForward::new(self.params, &input);
            let mut round_success = false;
            for step in 0..=cfg.steps {
                let input = assemble(&free);
                let trace = fwd.update(self.params, &input);
                let logits = trace.logits.as_slice().expect("contiguous");
                let (f, dlogits) = margin_loss_grad(logits, self.label, cfg.kappa, cfg.target)?;
                let (dist, dist_grad) = distortion(&free);
                if !(f.is_finite() && dist.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite C&W objective at step {step} (margin {f}, distance {dist})"
                    )));
                }
                let pred = trace.predicted();
                if is_success(pred, self.label, cfg.target) {
                    round_success = true;
                    if best.as_ref().map_or(true, |b| dist < b.distortion) {
                        best = Some(Candidate {
                            points: input.clone(),
                            distortion: dist,
                            predicted: pred,
                            c,
                        });
                    }
                }
                if step == cfg.steps {
                    break;
                }
                iterations += 1;
                let dl = Array1::from(dlogits).mapv(|v| v * c);
                let g_in = classifier::backward(self.params, trace, &input, &dl, false).points;
                let g_free = route(&g_in);
                let grad: Vec<f64> = g_free
                    .iter()
                    .zip(&dist_grad)
                    .flat_map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
                    .collect();
                opt.step(&mut flat, &grad);
                for (p, chunk) in free.iter_mut().zip(flat.chunks_exact_mut(3)) {
                    for a in 0..3 {
                        chunk[a] = chunk[a].clamp(0.0, 1.0);
                        p[a] = chunk[a];
                    }
                }
            }
            if round_success {
                hi = c;
            } else {
                lo = c;
            }
            c = (lo * hi).sqrt();
        }
        Ok((best, iterations))
    }
}

fn unchanged(cloud: &PointCloud, label: usize, pred: usize, target: Option<usize>) -> AttackResult {
    AttackResult {
        cloud: cloud.clone(),
        success: is_success(pred, label, target),
        distortion: 0.0,
        predicted: pred,
        true_label: label,
        target,
        iterations: 0,
        skipped: true,
        c: None,
        dropped: Vec::new(),
    }
}

fn already_done(pred: usize, label: usize, target: Option<usize>) -> bool {
    match target {
        None => pred != label,
        Some(t) => pred == t,
    }
}

/// C&W point shifting: minimizes `|delta|_2 + c * margin(X + delta)` with Adam,
/// keeping `X + delta` inside the unit cube, and returns the lowest-distortion
/// successful iterate over all binary-search rounds (or the clean cloud if
/// none succeeded).
pub fn cw_shift(
    params: &ClassifierParams,
    cloud: &PointCloud,
    label: usize,
    cfg: &CwConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let pred = classifier::predict(params, cloud);
    if already_done(pred, label, cfg.target) {
        return Ok(unchanged(cloud, label, pred, cfg.target));
    }
    let clean = cloud.points();
    let problem = CwProblem { params, label, cfg };
    let (best, iterations) = problem.run(
        clean,
        |free| free.to_vec(),
        |free| {
            let delta: Vec<Point> = free.iter().zip(clean).map(|(a, b)| geom::sub(a, b)).collect();
            let norm = delta.iter().map(|d| geom::dot(d, d)).sum::<f64>().sqrt();
            let grad = if norm > 0.0 {
                delta.iter().map(|d| geom::scale(d, 1.0 / norm)).collect()
            } else {
                vec![[0.0; 3]; delta.len()]
            };
            (norm, grad)
        },
        |g| g.to_vec(),
    )?;
    Ok(finish(cloud, label, pred, cfg.target, best, iterations))
}

fn finish(
    cloud: &PointCloud,
    label: usize,
    clean_pred: usize,
    target: Option<usize>,
    best: Option<Candidate>,
    iterations: usize,
) -> AttackResult {
    match best {
        Some(b) => AttackResult {
            cloud: PointCloud::new(b.points).expect("finite attack output"),
            success: true,
            distortion: b.distortion,
            predicted: b.predicted,
            true_label: label,
            target,
            iterations,
            skipped: false,
            c: Some(b.c),
            dropped: Vec::new(),
        },
        None => AttackResult {
            cloud: cloud.clone(),
            success: false,
            distortion: 0.0,
            predicted: clean_pred,
            true_label: label,
            target,
            iterations,
            skipped: false,
            c: None,
            dropped: Vec::new(),
        },
    }
}

/// C&W point adding by initialize-and-shift.
///
/// `added_points` copies of existing points (critical points first, in random
/// order) are appended and then moved by Adam on
/// `D(added, X) + c * margin(X ∪ added)`; the original points never move.
/// The output lists the clean points first, then the added ones.
pub fn cw_add(
    params: &ClassifierParams,
    cloud: &PointCloud,
    label: usize,
    cfg: &CwConfig,
    metric: SetMetric,
) -> Result<AttackResult> {
    cfg.validate()?;
    let m = cfg.added_points;
    if m == 0 {
        return Err(Error::contract("point adding needs at least one added point"));
    }
    let pred = classifier::predict(params, cloud);
    if already_done(pred, label, cfg.target) {
        return Ok(unchanged(cloud, label, pred, cfg.target));
    }
    let clean = cloud.points();
    let n = clean.len();
    let start: Vec<Point> = initial_added_points(params, cloud, m, cfg.seed)
        .into_iter()
        .map(|i| clean[i])
        .collect();
    let index = NeighborIndex::from_points(clean);

    let problem = CwProblem { params, label, cfg };
    // Added points go first in the classifier input: forward is permutation
    // invariant, and max-pool ties then route gradient to the copies rather
    // than to the originals they duplicate.
    let assemble = |free: &[Point]| {
        let mut all = Vec::with_capacity(n + free.len());
        all.extend_from_slice(free);
        all.extend_from_slice(clean);
        all
    };
    let distortion = |free: &[Point]| set_distance_and_grad(free, clean, &index, metric);
    let (best, iterations) = problem.run(&start, assemble, distortion, |g| g[..m].to_vec())?;

    let (best, iterations) = match best {
        Some(mut b) => {
            // reorder to clean-first
            let added: Vec<Point> = b.points[..m].to_vec();
            b.points = clean.to_vec();
            b.points.extend(added);
            (Some(b), iterations)
        }
        None => (None, iterations),
    };
    let mut res = finish(cloud, label, pred, cfg.target, best, iterations);
    if !res.success {
        let mut pts = clean.to_vec();
        pts.extend_from_slice(&start);
        res.cloud = PointCloud::new(pts)?;
        res.distortion = 0.0;
    }
    Ok(res)
}

fn initial_added_points(params: &ClassifierParams, cloud: &PointCloud, m: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut critical = classifier::critical_subset(params, cloud);
    critical.shuffle(&mut rng);
    let mut chosen: Vec<usize> = critical.into_iter().take(m).collect();
    if chosen.len() < m {
        let mut rest: Vec<usize> = (0..cloud.len()).filter(|i| !chosen.contains(i)).collect();
        rest.shuffle(&mut rng);
        chosen.extend(rest.into_iter().take(m - chosen.len()));
    }
    // more copies than points: cycle
    let mut i = 0;
    while chosen.len() < m {
        chosen.push(chosen[i]);
        i += 1;
    }
    chosen
}

/// Directed Hausdorff or one-sided (squared) Chamfer from `added` to `clean`,
/// with the gradient with respect to `added`.
fn set_distance_and_grad(
    added: &[Point],
    clean: &[Point],
    index: &NeighborIndex,
    metric: SetMetric,
) -> (f64, Vec<Point>) {
    let nearest: Vec<(usize, f64)> = added
        .iter()
        .map(|a| index.nearest(a).expect("nonempty clean cloud"))
        .collect();
    let mut grad = vec![[0.0; 3]; added.len()];
    match metric {
        SetMetric::Hausdorff => {
            let (worst, &(j, d)) = nearest
                .iter()
                .enumerate()
                .fold((0, &nearest[0]), |acc, (i, e)| if e.1 > acc.1 .1 { (i, e) } else { acc });
            if d > 0.0 {
                grad[worst] = geom::scale(&geom::sub(&added[worst], &clean[j]), 1.0 / d);
            }
            (d, grad)
        }
        SetMetric::Chamfer => {
            let m = added.len() as f64;
            let mut total = 0.0;
            for (i, &(j, d)) in nearest.iter().enumerate() {
                total += d * d;
                grad[i] = geom::scale(&geom::sub(&added[i], &clean[j]), 2.0 / m);
            }
            (total / m, grad)
        }
    }
}

/// Recomputes the distortion an attack reports, from the clean and
/// adversarial clouds alone.
pub fn recompute_shift_distortion(clean: &PointCloud, adv: &PointCloud) -> Result<f64> {
    Ok(metrics::paired_l2(clean, adv)?.total)
}

pub fn recompute_add_distortion(clean: &PointCloud, adv: &PointCloud, metric: SetMetric) -> Result<f64> {
    let n = clean.len();
    if adv.len() <= n || adv.points()[..n] != *clean.points() {
        return Err(Error::contract("adversarial cloud does not extend the clean cloud"));
    }
    let added = &adv.points()[n..];
    match metric {
        SetMetric::Hausdorff => metrics::hausdorff_directed(added, clean.points()),
        SetMetric::Chamfer => metrics::one_sided_chamfer(clean.points(), added),
    }
}

/// Radial saliency per point: `-r_i^alpha * ((x_i - x_c) . g_i)`, where `g_i`
/// is the cross-entropy gradient at point `i`, `x_c` the coordinate-wise
/// median, and `r_i = |x_i - x_c|`.
pub fn saliency_scores(
    params: &ClassifierParams,
    cloud: &PointCloud,
    label: usize,
    alpha: f64,
) -> Result<Vec<f64>> {
    if label >= params.num_classes() {
        return Err(Error::contract(format!("label {label} out of range")));
    }
    let trace = classifier::forward(params, cloud);
    Ok(saliency_from_trace(params, &trace, cloud.points(), label, alpha))
}

fn saliency_from_trace(
    params: &ClassifierParams,
    trace: &ForwardTrace,
    points: &[Point],
    label: usize,
    alpha: f64,
) -> Vec<f64> {
    let (_, dlogits) = classifier::cross_entropy(&trace.logits, label);
    let g = classifier::backward(params, trace, points, &dlogits, false).points;
    let center = geom::coordinate_median(points);
    points
        .iter()
        .zip(&g)
        .map(|(p, gi)| {
            let rel = geom::sub(p, &center);
            let r = geom::norm(&rel);
            -r.powf(alpha) * geom::dot(&rel, gi)
        })
        .collect()
}

/// Iterative saliency dropping: `loops` rounds, each recomputing scores on the
/// surviving cloud and removing `total_drop / loops` points from the end of
/// the ranking selected by `cfg.order` (ties by smaller index).
pub fn drop_attack(
    params: &ClassifierParams,
    cloud: &PointCloud,
    label: usize,
    cfg: &SaliencyConfig,
) -> Result<AttackResult> {
    if cfg.loops == 0 || cfg.total_drop % cfg.loops != 0 {
        return Err(Error::param(format!(
            "total_drop {} must be divisible by loops {}",
            cfg.total_drop, cfg.loops
        )));
    }
    if cfg.total_drop >= cloud.len() {
        return Err(Error::contract(format!(
            "cannot drop {} of {} points",
            cfg.total_drop,
            cloud.len()
        )));
    }
    if cfg.alpha < 0.0 {
        return Err(Error::param("alpha must be >= 0"));
    }
    if label >= params.num_classes() {
        return Err(Error::contract(format!("label {label} out of range")));
    }
    let per_loop = cfg.total_drop / cfg.loops;
    let mut alive: Vec<usize> = (0..cloud.len()).collect();
    let mut dropped = Vec::with_capacity(cfg.total_drop);
    for _ in 0..cfg.loops {
        let pts: Vec<Point> = alive.iter().map(|&i| *cloud.point(i)).collect();
        let trace = classifier::forward_points(params, &pts);
        let scores = saliency_from_trace(params, &trace, &pts, label, cfg.alpha);
        let mut rank: Vec<usize> = (0..pts.len()).collect();
        match cfg.order {
            DropOrder::Highest => rank.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))),
            DropOrder::Lowest => rank.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))),
        }
        let mut gone: Vec<usize> = rank[..per_loop].to_vec();
        gone.sort_unstable();
        dropped.extend(gone.iter().map(|&r| alive[r]));
        let mut g = gone.iter().peekable();
        let mut next = Vec::with_capacity(alive.len() - per_loop);
        for (r, &i) in alive.iter().enumerate() {
            if g.peek() == Some(&&r) {
                g.next();
            } else {
                next.push(i);
            }
        }
        alive = next;
    }
    let out = cloud.select(&alive)?;
    let predicted = classifier::predict(params, &out);
    dropped.sort_unstable();
    Ok(AttackResult {
        success: predicted != label,
        distortion: cfg.total_drop as f64,
        predicted,
        true_label: label,
        target: None,
        iterations: cfg.loops,
        skipped: false,
        c: None,
        cloud: out,
        dropped,
    })
}
