//! A small max-pooling point-set classifier with analytic gradients.
//!
//! Each point goes through a shared MLP (3 -> 32 -> 64 -> 128, ReLU), features
//! are max-pooled over points, and a dense head (128 -> 64 -> C) produces the
//! logits. Max-pool ties go to the smallest point index, both in the forward
//! pass and when routing gradients, so only the argmax points of the pooled
//! features ever receive gradient.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::checkpoint::Checkpoint;
use crate::cloud::{LabeledCloud, PointCloud};
use crate::error::{Error, Result};
use crate::geom::Point;

pub const POINT_WIDTHS: [usize; 4] = [3, 32, 64, 128];
pub const HEAD_HIDDEN: usize = 64;
pub const CHECKPOINT_FORMAT: &str = "dupnet-classifier";

/// Fully connected layer, `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }

    pub(crate) fn he_normal(input: usize, output: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let std = (gain / input as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            w: Array2::from_shape_simple_fn((input, output), || normal.sample(rng)),
            b: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// `out = x W + b` for one row. The accumulation order is fixed, so a row
    /// gives the same bits whether computed alone or as part of a batch.
    #[inline]
    pub fn forward_row(&self, x: &[f64], out: &mut [f64]) {
        let w = self.w.as_slice().expect("standard layout");
        let width = out.len();
        out.copy_from_slice(self.b.as_slice().expect("standard layout"));
        for (k, &xk) in x.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            let row = &w[k * width..(k + 1) * width];
            for (o, &wk) in out.iter_mut().zip(row) {
                *o += xk * wk;
            }
        }
    }

    /// Row-batched `X W + b`.
    pub fn apply_rows(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = Array2::zeros((x.nrows(), self.output_dim()));
        let mut buf = vec![0.0; self.input_dim()];
        for (xr, mut zr) in x.outer_iter().zip(z.outer_iter_mut()) {
            buf.iter_mut().zip(xr.iter()).for_each(|(b, &v)| *b = v);
            self.forward_row(&buf, zr.as_slice_mut().expect("standard layout"));
        }
        z
    }

    pub fn apply_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(self.output_dim());
        self.forward_row(
            x.as_slice().expect("standard layout"),
            out.as_slice_mut().expect("standard layout"),
        );
        out
    }
}

pub(crate) fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

pub(crate) fn relu_mask_inplace(grad: &mut Array2<f64>, pre: ArrayView2<f64>) {
    grad.zip_mut_with(&pre, |g, &z| {
        if z <= 0.0 {
            *g = 0.0
        }
    });
}

/// Weights of the classifier; the same shape doubles as a gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// Shared per-point MLP, applied with ReLU after every layer.
    pub point_layers: [Dense; 3],
    /// Hidden head layer (ReLU) and the logit layer.
    pub head: [Dense; 2],
}

impl ClassifierParams {
    pub fn init(num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = POINT_WIDTHS;
        Self {
            point_layers: [
                Dense::he_normal(w[0], w[1], 2.0, &mut rng),
                Dense::he_normal(w[1], w[2], 2.0, &mut rng),
                Dense::he_normal(w[2], w[3], 2.0, &mut rng),
            ],
            head: [
                Dense::he_normal(w[3], HEAD_HIDDEN, 2.0, &mut rng),
                Dense::he_normal(HEAD_HIDDEN, num_classes, 1.0, &mut rng),
            ],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.input_dim(), d.output_dim());
        Self {
            point_layers: [
                z(&self.point_layers[0]),
                z(&self.point_layers[1]),
                z(&self.point_layers[2]),
            ],
            head: [z(&self.head[0]), z(&self.head[1])],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head[1].output_dim()
    }

    pub fn pooled_dim(&self) -> usize {
        self.point_layers[2].output_dim()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.point_layers.iter().chain(self.head.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.point_layers.iter_mut().chain(self.head.iter_mut())
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

    pub fn validate(&self) -> Result<()> {
        let dims: Vec<(usize, usize)> = self
            .layers()
            .map(|l| (l.input_dim(), l.output_dim()))
            .collect();
        if dims[0].0 != 3 {
            return Err(Error::contract("first layer must take 3D points"));
        }
        for pair in dims.windows(2) {
            if pair[0].1 != pair[1].0 {
                return Err(Error::contract("classifier layer shapes do not chain"));
            }
        }
        if self.layers().any(|l| l.b.len() != l.output_dim()) {
            return Err(Error::contract("bias length does not match layer width"));
        }
        if self.num_classes() < 2 {
            return Err(Error::contract("classifier needs at least two classes"));
        }
        if self.flatten().iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("classifier parameters must be finite"));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_FORMAT);
        ck.meta
            .insert("num_classes".into(), self.num_classes().into());
        for (i, l) in self.point_layers.iter().enumerate() {
            ck.push_matrix(format!("point{i}.w"), &l.w);
            ck.push_vector(format!("point{i}.b"), &l.b);
        }
        for (i, l) in self.head.iter().enumerate() {
            ck.push_matrix(format!("head{i}.w"), &l.w);
            ck.push_vector(format!("head{i}.b"), &l.b);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_format(CHECKPOINT_FORMAT)?;
        let layer = |prefix: String| -> Result<Dense> {
            Ok(Dense {
                w: ck.matrix(&format!("{prefix}.w"))?,
                b: ck.vector(&format!("{prefix}.b"))?,
            })
        };
        let params = Self {
            point_layers: [layer("point0".into())?, layer("point1".into())?, layer("point2".into())?],
            head: [layer("head0".into())?, layer("head1".into())?],
        };
        params.validate()?;
        Ok(params)
    }
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Pre-activations of the three per-point layers, one row per point.
    pub point_pre: [Array2<f64>; 3],
    /// Max-pooled (post-ReLU) features.
    pub pooled: Array1<f64>,
    /// Point index achieving each pooled feature.
    pub argmax: Vec<usize>,
    pub head_pre: Array1<f64>,
    pub logits: Array1<f64>,
}

impl ForwardTrace {
    pub fn num_points(&self) -> usize {
        self.point_pre[0].nrows()
    }

    pub fn predicted(&self) -> usize {
        argmax_first(self.logits.as_slice().expect("contiguous"))
    }
}

pub(crate) fn points_matrix(points: &[Point]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 3), |(i, a)| points[i][a])
}

/// Pre-activations of the per-point MLP for a batch of points.
pub fn point_preactivations(params: &ClassifierParams, points: &[Point]) -> [Array2<f64>; 3] {
    let [l1, l2, l3] = &params.point_layers;
    let n = points.len();
    let mut z1 = Array2::zeros((n, l1.output_dim()));
    let mut z2 = Array2::zeros((n, l2.output_dim()));
    let mut z3 = Array2::zeros((n, l3.output_dim()));
    let mut a1 = vec![0.0; l1.output_dim()];
    let mut a2 = vec![0.0; l2.output_dim()];
    for (i, p) in points.iter().enumerate() {
        let mut r1 = z1.row_mut(i);
        let r1 = r1.as_slice_mut().expect("standard layout");
        l1.forward_row(p, r1);
        a1.iter_mut().zip(r1.iter()).for_each(|(a, &z)| *a = z.max(0.0));
        let mut r2 = z2.row_mut(i);
        let r2 = r2.as_slice_mut().expect("standard layout");
        l2.forward_row(&a1, r2);
        a2.iter_mut().zip(r2.iter()).for_each(|(a, &z)| *a = z.max(0.0));
        let mut r3 = z3.row_mut(i);
        l3.forward_row(&a2, r3.as_slice_mut().expect("standard layout"));
    }
    [z1, z2, z3]
}

/// Pools per-point features and runs the head, completing a trace.
pub fn finish_forward(params: &ClassifierParams, point_pre: [Array2<f64>; 3]) -> ForwardTrace {
    let dim = point_pre[2].ncols();
    let mut trace = ForwardTrace {
        point_pre,
        pooled: Array1::zeros(dim),
        argmax: vec![0; dim],
        head_pre: Array1::zeros(0),
        logits: Array1::zeros(0),
    };
    repool(params, &mut trace);
    trace
}

/// Recomputes pooling and head from the stored per-point pre-activations.
pub fn repool(params: &ClassifierParams, trace: &mut ForwardTrace) {
    let z3 = &trace.point_pre[2];
    trace.pooled.fill(f64::NEG_INFINITY);
    for (i, row) in z3.outer_iter().enumerate() {
        for ((d, &z), best) in row.iter().enumerate().zip(trace.pooled.iter_mut()) {
            let a = z.max(0.0);
            if a > *best {
                *best = a;
                trace.argmax[d] = i;
            }
        }
    }
    trace.head_pre = params.head[0].apply_vec(&trace.pooled);
    let hidden = trace.head_pre.mapv(|v| v.max(0.0));
    trace.logits = params.head[1].apply_vec(&hidden);
}

/// Forward evaluation that, between calls, only recomputes the per-point
/// features of points whose coordinates changed. Results are bitwise equal to
/// a full [`forward`].
#[derive(Debug, Clone)]
pub struct IncrementalForward {
    points: Vec<Point>,
    trace: ForwardTrace,
}

impl IncrementalForward {
    pub fn new(params: &ClassifierParams, points: &[Point]) -> Self {
        Self {
            points: points.to_vec(),
            trace: forward_points(params, points),
        }
    }

    pub fn trace(&self) -> &ForwardTrace {
        &self.trace
    }

    pub fn update(&mut self, params: &ClassifierParams, points: &[Point]) -> &ForwardTrace {
        if points.len() != self.points.len() {
            *self = Self::new(params, points);
            return &self.trace;
        }
        let changed: Vec<usize> = (0..points.len())
            .filter(|&i| points[i] != self.points[i])
            .collect();
        if changed.is_empty() {
            return &self.trace;
        }
        let sel: Vec<Point> = changed.iter().map(|&i| points[i]).collect();
        let fresh = point_preactivations(params, &sel);
        for (layer, rows) in self.trace.point_pre.iter_mut().zip(fresh.iter()) {
            for (r, &i) in changed.iter().enumerate() {
                layer.row_mut(i).assign(&rows.row(r));
            }
        }
        for &i in &changed {
            self.points[i] = points[i];
        }
        repool(params, &mut self.trace);
        &self.trace
    }
}

pub fn forward(params: &ClassifierParams, cloud: &PointCloud) -> ForwardTrace {
    forward_points(params, cloud.points())
}

pub fn forward_points(params: &ClassifierParams, points: &[Point]) -> ForwardTrace {
    assert!(!points.is_empty(), "forward on an empty point set");
    finish_forward(params, point_preactivations(params, points))
}

pub fn logits(params: &ClassifierParams, cloud: &PointCloud) -> Array1<f64> {
    forward(params, cloud).logits
}

pub fn predict(params: &ClassifierParams, cloud: &PointCloud) -> usize {
    forward(params, cloud).predicted()
}

/// Index of the largest value, smallest index on ties.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of softmax(logits) against `label`, with its logit gradient.
pub fn cross_entropy(logits: &Array1<f64>, label: usize) -> (f64, Array1<f64>) {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad = exp / sum;
    grad[label] -= 1.0;
    (loss, grad)
}

/// Gradients of a scalar function of the logits.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// `None` when only the input gradient was requested.
    pub params: Option<ClassifierParams>,
    /// One 3-vector per input point; zero for points that are not the argmax
    /// of any pooled feature.
    pub points: Vec<Point>,
}

/// Back-propagates `dlogits` through a trace.
///
/// Only the argmax points of the pooled features receive gradient, so the
/// per-point MLP is re-entered for at most `pooled_dim` rows.
pub fn backward(
    params: &ClassifierParams,
    trace: &ForwardTrace,
    points: &[Point],
    dlogits: &Array1<f64>,
    want_params: bool,
) -> Gradients {
    let n = trace.num_points();
    assert_eq!(points.len(), n);
    let hidden = trace.head_pre.mapv(|v| v.max(0.0));
    let mut grads = want_params.then(|| params.zeros_like());

    // logit layer
    let d_hidden = params.head[1].w.dot(dlogits);
    let mut d_head_pre = d_hidden;
    d_head_pre.zip_mut_with(&trace.head_pre, |g, &z| {
        if z <= 0.0 {
            *g = 0.0
        }
    });
    let d_pooled = params.head[0].w.dot(&d_head_pre);
    if let Some(g) = grads.as_mut() {
        g.head[1].w = outer(&hidden, dlogits);
        g.head[1].b = dlogits.clone();
        g.head[0].w = outer(&trace.pooled, &d_head_pre);
        g.head[0].b = d_head_pre.clone();
    }

    // route pooled gradient to the argmax points
    let mut rows: Vec<usize> = trace.argmax.clone();
    rows.sort_unstable();
    rows.dedup();
    let mut slot = vec![usize::MAX; n];
    for (r, &i) in rows.iter().enumerate() {
        slot[i] = r;
    }
    let m = rows.len();
    let gather = |a: &Array2<f64>| a.select(Axis(0), &rows);
    let z1 = gather(&trace.point_pre[0]);
    let z2 = gather(&trace.point_pre[1]);
    let z3 = gather(&trace.point_pre[2]);

    let mut dz3 = Array2::<f64>::zeros((m, z3.ncols()));
    for (d, &i) in trace.argmax.iter().enumerate() {
        dz3[[slot[i], d]] += d_pooled[d];
    }
    relu_mask_inplace(&mut dz3, z3.view());

    let mut a2 = z2.clone();
    relu_inplace(&mut a2);
    let mut dz2 = dz3.dot(&params.point_layers[2].w.t());
    relu_mask_inplace(&mut dz2, z2.view());

    let mut a1 = z1.clone();
    relu_inplace(&mut a1);
    let mut dz1 = dz2.dot(&params.point_layers[1].w.t());
    relu_mask_inplace(&mut dz1, z1.view());

    let sel_points: Vec<Point> = rows.iter().map(|&i| points[i]).collect();
    let x = points_matrix(&sel_points);
    let dx = dz1.dot(&params.point_layers[0].w.t());

    if let Some(g) = grads.as_mut() {
        g.point_layers[2].w = a2.t().dot(&dz3);
        g.point_layers[2].b = dz3.sum_axis(Axis(0));
        g.point_layers[1].w = a1.t().dot(&dz2);
        g.point_layers[1].b = dz2.sum_axis(Axis(0));
        g.point_layers[0].w = x.t().dot(&dz1);
        g.point_layers[0].b = dz1.sum_axis(Axis(0));
    }

    let mut point_grads = vec![[0.0; 3]; n];
    for (r, &i) in rows.iter().enumerate() {
        let row = dx.slice(s![r, ..]);
        point_grads[i] = [row[0], row[1], row[2]];
    }
    Gradients {
        params: grads,
        points: point_grads,
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

pub struct LossAndGrads {
    pub loss: f64,
    pub params: ClassifierParams,
    pub points: Vec<Point>,
    pub trace: ForwardTrace,
}

/// Cross-entropy loss with gradients for both the weights and the input points.
pub fn loss_and_grads(params: &ClassifierParams, cloud: &PointCloud, label: usize) -> LossAndGrads {
    let trace = forward(params, cloud);
    let (loss, dlogits) = cross_entropy(&trace.logits, label);
    let g = backward(params, &trace, cloud.points(), &dlogits, true);
    LossAndGrads {
        loss,
        params: g.params.expect("requested"),
        points: g.points,
        trace,
    }
}

/// Indices of the points that achieve at least one pooled feature, ascending.
pub fn critical_subset(params: &ClassifierParams, cloud: &PointCloud) -> Vec<usize> {
    let mut c = forward(params, cloud).argmax;
    c.sort_unstable();
    c.dedup();
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.001,
            weight_decay: 1e-5,
            seed: 1,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::param("epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::param("learning rate must be > 0 and weight decay >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

pub fn accuracy(params: &ClassifierParams, data: &[LabeledCloud]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct: usize = data
        .par_iter()
        .map(|s| usize::from(predict(params, &s.cloud) == s.label))
        .sum();
    correct as f64 / data.len() as f64
}

/// Adam training on cross-entropy. Minibatch gradients are summed in a fixed
/// order, so the result is identical for a given seed regardless of threads.
pub fn train(
    train_set: &[LabeledCloud],
    test_set: Option<&[LabeledCloud]>,
    num_classes: usize,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(ClassifierParams, Vec<EpochStats>)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    if num_classes < 2 {
        return Err(Error::contract("training needs at least two classes"));
    }
    if let Some(bad) = train_set.iter().find(|s| s.label >= num_classes) {
        return Err(Error::contract(format!("label {} out of range", bad.label)));
    }
    let mut params = ClassifierParams::init(num_classes, cfg.seed);
    let mut flat = params.flatten();
    let mut opt = Adam::new(flat.len(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, bool, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let lg = loss_and_grads(&params, &s.cloud, s.label);
                    let hit = lg.trace.predicted() == s.label;
                    (lg.loss, hit, lg.params.flatten())
                })
                .collect();
            let mut grad = vec![0.0; flat.len()];
            for (loss, hit, g) in &results {
                loss_sum += loss;
                correct += usize::from(*hit);
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            let scale = 1.0 / batch.len() as f64;
            for (g, p) in grad.iter_mut().zip(&flat) {
                *g = *g * scale + 2.0 * cfg.weight_decay * p;
            }
            opt.step(&mut flat, &grad);
            params.assign_flat(&flat);
            if !loss_sum.is_finite() {
                return Err(Error::Numerical(format!("training loss diverged in epoch {epoch}")));
            }
        }
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            test_accuracy: test_set.map(|t| accuracy(&params, t)),
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((params, history))
}
