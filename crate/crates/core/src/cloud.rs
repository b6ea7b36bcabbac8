//! Point-cloud container, synthetic surface sampling, unit-cube normalization
//! and the plain-text `.xyz` format.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Point;

/// An ordered, nonempty list of finite 3D points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("point cloud must contain at least one point"));
        }
        if let Some(i) = points
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::contract(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn points(&self) -> &[Point] {
        &self.points
    }

    #[inline]
    pub fn point(&self, i: usize) -> &Point {
        &self.points[i]
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    /// Points at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        PointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    /// Points whose index is not in `removed` (which must be sorted).
    pub fn without(&self, removed: &[usize]) -> Result<Self> {
        let mut keep = Vec::with_capacity(self.len().saturating_sub(removed.len()));
        let mut r = removed.iter().peekable();
        for (i, p) in self.points.iter().enumerate() {
            if r.peek() == Some(&&i) {
                r.next();
                continue;
            }
            keep.push(*p);
        }
        PointCloud::new(keep)
    }

    pub fn bounding_box(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

impl TryFrom<Vec<Point>> for PointCloud {
    type Error = Error;

    fn try_from(points: Vec<Point>) -> Result<Self> {
        PointCloud::new(points)
    }
}

impl From<PointCloud> for Vec<Point> {
    fn from(c: PointCloud) -> Self {
        c.points
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
    Capsule,
    Disk,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 8] = [
        ShapeFamily::Sphere,
        ShapeFamily::Cube,
        ShapeFamily::Cylinder,
        ShapeFamily::Cone,
        ShapeFamily::Torus,
        ShapeFamily::Pyramid,
        ShapeFamily::Capsule,
        ShapeFamily::Disk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Cube => "cube",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Cone => "cone",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Pyramid => "pyramid",
            ShapeFamily::Capsule => "capsule",
            ShapeFamily::Disk => "disk",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    /// Number of entries of `ShapeSpec::dims` this family reads.
    fn arity(self) -> usize {
        match self {
            ShapeFamily::Sphere | ShapeFamily::Disk => 1,
            ShapeFamily::Cube => 3,
            _ => 2,
        }
    }

    /// A randomized instance whose longest extent is about 1, with a random
    /// yaw about the z axis.
    pub fn random_spec<R: Rng>(self, rng: &mut R, jitter: f64) -> ShapeSpec {
        let dims = match self {
            ShapeFamily::Sphere => [0.5, 0.0, 0.0],
            ShapeFamily::Disk => [0.5, 0.0, 0.0],
            ShapeFamily::Cube => [
                0.5,
                0.5 * rng.gen_range(0.55..1.0),
                0.5 * rng.gen_range(0.55..1.0),
            ],
            ShapeFamily::Cylinder | ShapeFamily::Cone => {
                // height / diameter
                let aspect: f64 = rng.gen_range(0.6..1.8);
                let (d, h) = if aspect >= 1.0 { (1.0 / aspect, 1.0) } else { (1.0, aspect) };
                [0.5 * d, h, 0.0]
            }
            ShapeFamily::Torus => {
                let ratio: f64 = rng.gen_range(0.2..0.45);
                let major = 0.5 / (1.0 + ratio);
                [major, major * ratio, 0.0]
            }
            ShapeFamily::Pyramid => {
                // height / base width
                let aspect: f64 = rng.gen_range(0.5..1.5);
                let (w, h) = if aspect >= 1.0 { (1.0 / aspect, 1.0) } else { (1.0, aspect) };
                [0.5 * w, h, 0.0]
            }
            ShapeFamily::Capsule => {
                // straight section length / diameter
                let aspect: f64 = rng.gen_range(0.5..2.0);
                let radius = 0.5 / (1.0 + aspect);
                [radius, 2.0 * radius * aspect, 0.0]
            }
        };
        ShapeSpec {
            family: self,
            dims,
            yaw: rng.gen_range(0.0..2.0 * PI),
            jitter,
        }
    }
}

/// A parametric surface to sample from.
///
/// `dims` is read per family:
/// sphere `[radius]`, cube `[half_x, half_y, half_z]`, cylinder and cone
/// `[radius, height]`, torus `[major, minor]`, pyramid `[half_base, height]`,
/// capsule `[radius, straight_length]`, disk `[radius]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub family: ShapeFamily,
    pub dims: [f64; 3],
    /// Rotation about the z axis, radians.
    #[serde(default)]
    pub yaw: f64,
    /// Standard deviation of isotropic Gaussian surface noise.
    pub jitter: f64,
}

impl ShapeSpec {
    pub fn new(family: ShapeFamily, dims: [f64; 3], jitter: f64) -> Self {
        Self {
            family,
            dims,
            yaw: 0.0,
            jitter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::param(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        if !self.yaw.is_finite() {
            return Err(Error::param("yaw must be finite"));
        }
        for (i, d) in self.dims.iter().take(self.family.arity()).enumerate() {
            if !(*d > 0.0 && d.is_finite()) {
                return Err(Error::param(format!(
                    "{} dimension {i} must be > 0, got {d}",
                    self.family.name()
                )));
            }
        }
        if self.family == ShapeFamily::Torus && self.dims[1] >= self.dims[0] {
            return Err(Error::param("torus minor radius must be below the major radius"));
        }
        Ok(())
    }
}

/// Samples `n` points area-uniformly from the surface described by `spec`,
/// then adds Gaussian jitter. Deterministic for fixed `(spec, n, seed)`.
pub fn sample_shape(spec: &ShapeSpec, n: usize, seed: u64) -> Result<PointCloud> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::contract("sample count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts: Vec<Point> = (0..n).map(|_| surface_point(spec, &mut rng)).collect();

    let (s, c) = spec.yaw.sin_cos();
    if spec.yaw != 0.0 {
        for p in &mut pts {
            let (x, y) = (p[0], p[1]);
            p[0] = c * x - s * y;
            p[1] = s * x + c * y;
        }
    }
    if spec.jitter > 0.0 {
        let noise = Normal::new(0.0, spec.jitter).expect("validated jitter");
        for p in &mut pts {
            for v in p.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    PointCloud::new(pts)
}

fn unit_sphere<R: Rng>(rng: &mut R) -> Point {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

fn disk_point<R: Rng>(rng: &mut R, radius: f64) -> (f64, f64) {
    let rho = radius * rng.gen::<f64>().sqrt();
    let phi: f64 = rng.gen_range(0.0..2.0 * PI);
    (rho * phi.cos(), rho * phi.sin())
}

fn triangle_point<R: Rng>(rng: &mut R, a: Point, b: Point, c: Point) -> Point {
    let mut u: f64 = rng.gen();
    let mut v: f64 = rng.gen();
    if u + v > 1.0 {
        u = 1.0 - u;
        v = 1.0 - v;
    }
    [
        a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]),
        a[1] + u * (b[1] - a[1]) + v * (c[1] - a[1]),
        a[2] + u * (b[2] - a[2]) + v * (c[2] - a[2]),
    ]
}

fn pick<R: Rng>(rng: &mut R, areas: &[f64]) -> usize {
    WeightedIndex::new(areas).expect("positive areas").sample(rng)
}

fn surface_point<R: Rng>(spec: &ShapeSpec, rng: &mut R) -> Point {
    let [d0, d1, d2] = spec.dims;
    match spec.family {
        ShapeFamily::Sphere => {
            let u = unit_sphere(rng);
            [u[0] * d0, u[1] * d0, u[2] * d0]
        }
        ShapeFamily::Disk => {
            let (x, y) = disk_point(rng, d0);
            [x, y, 0.0]
        }
        ShapeFamily::Cube => {
            let h = [d0, d1, d2];
            // faces normal to x, y, z
            let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let axis = pick(rng, &areas);
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let mut p = [0.0; 3];
            for (a, slot) in p.iter_mut().enumerate() {
                *slot = if a == axis {
                    sign * h[a]
                } else {
                    rng.gen_range(-h[a]..=h[a])
                };
            }
            p
        }
        ShapeFamily::Cylinder => {
            let (r, h) = (d0, d1);
            let areas = [2.0 * PI * r * h, PI * r * r, PI * r * r];
            match pick(rng, &areas) {
                0 => {
                    let phi: f64 = rng.gen_range(0.0..2.0 * PI);
                    let z = rng.gen_range(-0.5 * h..=0.5 * h);
                    [r * phi.cos(), r * phi.sin(), z]
                }
                cap => {
                    let (x, y) = disk_point(rng, r);
                    [x, y, if cap == 1 { 0.5 * h } else { -0.5 * h }]
                }
            }
        }
        ShapeFamily::Cone => {
            let (r, h) = (d0, d1);
            let slant = (r * r + h * h).sqrt();
            let areas = [PI * r * slant, PI * r * r];
            if pick(rng, &areas) == 0 {
                // fraction of the way from apex to rim; lateral density grows linearly
                let t = rng.gen::<f64>().sqrt();
                let phi: f64 = rng.gen_range(0.0..2.0 * PI);
                [r * t * phi.cos(), r * t * phi.sin(), h * (1.0 - t) - 0.5 * h]
            } else {
                let (x, y) = disk_point(rng, r);
                [x, y, -0.5 * h]
            }
        }
        ShapeFamily::Torus => {
            let (big, small) = (d0, d1);
            let theta = loop {
                let t: f64 = rng.gen_range(0.0..2.0 * PI);
                let w = (big + small * t.cos()) / (big + small);
                if rng.gen::<f64>() <= w {
                    break t;
                }
            };
            let phi: f64 = rng.gen_range(0.0..2.0 * PI);
            let ring = big + small * theta.cos();
            [ring * phi.cos(), ring * phi.sin(), small * theta.sin()]
        }
        ShapeFamily::Pyramid => {
            let (a, h) = (d0, d1);
            let slant = (h * h + a * a).sqrt();
            let side = a * slant; // 0.5 * (2a) * slant
            let areas = [4.0 * a * a, side, side, side, side];
            let z0 = -0.5 * h;
            match pick(rng, &areas) {
                0 => [rng.gen_range(-a..=a), rng.gen_range(-a..=a), z0],
                f => {
                    let corners = [[a, a], [-a, a], [-a, -a], [a, -a]];
                    let c0 = corners[f - 1];
                    let c1 = corners[f % 4];
                    triangle_point(
                        rng,
                        [c0[0], c0[1], z0],
                        [c1[0], c1[1], z0],
                        [0.0, 0.0, z0 + h],
                    )
                }
            }
        }
        ShapeFamily::Capsule => {
            let (r, len) = (d0, d1);
            let areas = [2.0 * PI * r * len, 4.0 * PI * r * r];
            if pick(rng, &areas) == 0 {
                let phi: f64 = rng.gen_range(0.0..2.0 * PI);
                let z = rng.gen_range(-0.5 * len..=0.5 * len);
                [r * phi.cos(), r * phi.sin(), z]
            } else {
                let u = unit_sphere(rng);
                let shift = if u[2] >= 0.0 { 0.5 * len } else { -0.5 * len };
                [u[0] * r, u[1] * r, u[2] * r + shift]
            }
        }
    }
}

/// Maps the bounding box into `[0,1]^3` with one uniform scale (longest side
/// becomes 1) and centers the shorter axes. A cloud of identical points maps
/// to `(0.5, 0.5, 0.5)`.
pub fn normalize_unit_cube(cloud: &PointCloud) -> PointCloud {
    let (lo, hi) = cloud.bounding_box();
    let side = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let longest = side[0].max(side[1]).max(side[2]);
    let points = if longest <= 0.0 {
        vec![[0.5; 3]; cloud.len()]
    } else {
        let s = 1.0 / longest;
        let offset = [
            0.5 * (1.0 - side[0] * s),
            0.5 * (1.0 - side[1] * s),
            0.5 * (1.0 - side[2] * s),
        ];
        cloud
            .points()
            .iter()
            .map(|p| {
                let mut q = [0.0; 3];
                for a in 0..3 {
                    q[a] = ((p[a] - lo[a]) * s + offset[a]).clamp(0.0, 1.0);
                }
                q
            })
            .collect()
    };
    PointCloud { points }
}

/// Writes an `n 3` header followed by one `x y z` line per point. Values are
/// printed in shortest round-trip form, so `load_cloud` reproduces them exactly.
pub fn save_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_cloud(cloud)).map_err(|e| Error::io(path, e))
}

pub fn format_cloud(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 64);
    let _ = writeln!(s, "{} 3", cloud.len());
    for p in cloud.points() {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    s
}

pub fn load_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cloud(&text, path)
}

pub fn parse_cloud(text: &str, path: &Path) -> Result<PointCloud> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut declared: Option<(usize, usize)> = None;
    let mut points = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if points.is_empty() && declared.is_none() && fields.len() == 2 && fields[1] == "3" {
            if let Ok(n) = fields[0].parse::<usize>() {
                declared = Some((n, lineno));
                continue;
            }
        }
        if fields.len() != 3 {
            return Err(err(lineno, format!("expected 3 fields, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            let v: f64 = f
                .parse()
                .map_err(|_| err(lineno, format!("cannot parse {f:?} as a number")))?;
            if !v.is_finite() {
                return Err(err(lineno, format!("non-finite value {f:?}")));
            }
            *slot = v;
        }
        points.push(p);
    }
    if let Some((n, lineno)) = declared {
        if n != points.len() {
            return Err(err(
                lineno,
                format!("header declares {n} points but {} were read", points.len()),
            ));
        }
    }
    if points.is_empty() {
        return Err(err(0, "file contains no points".into()));
    }
    Ok(PointCloud { points })
}
