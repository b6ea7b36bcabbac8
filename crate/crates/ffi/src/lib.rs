//! C ABI over the dupnet toolkit.
//!
//! Objects are opaque heap handles created by `*_new`/`*_load` functions and
//! released with the matching `*_free`. Every fallible call returns a
//! [`DupnetStatus`]; on failure a description is available from
//! [`dupnet_last_error`] on the same thread until the next failing call.
//! Panics never cross the boundary; they surface as `DUPNET_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use dupnet::checkpoint::Checkpoint;
use dupnet::classifier::{self, ClassifierParams};
use dupnet::cloud;
use dupnet::defenses::{self, SorConfig, Upsampler};
use dupnet::metrics;
use dupnet::upsampler::UpsamplerParams;
use dupnet::{Error, PointCloud};

/// Result code of every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DupnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Contract = 3,
    Parse = 4,
    Io = 5,
    Numerical = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Point cloud handle.
pub struct DupnetCloud(PointCloud);

/// Classifier handle.
pub struct DupnetClassifier(ClassifierParams);

/// Learned upsampler handle.
pub struct DupnetUpsampler(UpsamplerParams);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("no interior nul"));
}

struct Failure(DupnetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Contract(_) => DupnetStatus::Contract,
            Error::Parameter(_) => DupnetStatus::InvalidArgument,
            Error::Parse { .. } | Error::Json(_) => DupnetStatus::Parse,
            Error::Numerical(_) => DupnetStatus::Numerical,
            Error::Io { .. } => DupnetStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(DupnetStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DupnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DupnetStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DupnetStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure(DupnetStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failure on this thread. The pointer stays valid until
/// the next failing call on the same thread; never free it.
#[no_mangle]
pub extern "C" fn dupnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a cloud from `n` packed `x y z` triples.
///
/// # Safety
/// `xyz` must point to `3 * n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dupnet_cloud_new(xyz: *const f64, n: usize, out: *mut *mut DupnetCloud) -> DupnetStatus {
    guard(|| {
        if xyz.is_null() {
            return Err(null("xyz"));
        }
        let flat = std::slice::from_raw_parts(xyz, 3 * n);
        let pts = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        emit(out, DupnetCloud(PointCloud::new(pts)?))
    })
}

/// # Safety
/// `cloud` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dupnet_cloud_free(cloud: *mut DupnetCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Number of points, or 0 for a null handle.
///
/// # Safety
/// `cloud` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dupnet_cloud_len(cloud: *const DupnetCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.len())
}

/// Copies the points into `out` as packed triples. `capacity` counts points.
///
/// # Safety
/// `cloud` must be a live handle; `out` must hold `3 * capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn dupnet_cloud_copy_points(
    cloud: *const DupnetCloud,
    out: *mut f64,
    capacity: usize,
) -> DupnetStatus {
    guard(|| {
        let c = &as_ref(cloud, "cloud")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        if capacity < c.len() {
            return Err(Failure(
                DupnetStatus::BufferTooSmall,
                format!("buffer holds {capacity} points, cloud has {}", c.len()),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(out, 3 * c.len());
        for (d, p) in dst.chunks_exact_mut(3).zip(c.points()) {
            d.copy_from_slice(p);
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dupnet_cloud_load(path: *const c_char, out: *mut *mut DupnetCloud) -> DupnetStatus {
    guard(|| emit(out, DupnetCloud(cloud::load_cloud(path_arg(path)?)?)))
}

/// # Safety
/// `cloud` must be a live handle; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dupnet_cloud_save(cloud: *const DupnetCloud, path: *const c_char) -> DupnetStatus {
    guard(|| Ok(cloud::save_cloud(&as_ref(cloud, "cloud")?.0, path_arg(path)?)?))
}

/// Aspect-preserving normalization into the unit cube.
///
/// # Safety
/// `cloud` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dupnet_normalize(cloud: *const DupnetCloud, out: *mut *mut DupnetCloud) -> DupnetStatus {
    guard(|| emit(out, DupnetCloud(cloud::normalize_unit_cube(&as_ref(cloud, "cloud")?.0))))
}

/// Statistical outlier removal. `removed` (optional) receives the number of
/// dropped points.
///
/// # Safety
/// `cloud` must be a live handle; `out` writable; `removed` null or writable.
#[no_mangle]
pub unsafe extern "C" fn dupnet_sor(
    cloud: *const DupnetCloud,
    k: usize,
    alpha: f64,
    out: *mut *mut DupnetCloud,
    removed: *mut usize,
) -> DupnetStatus {
    guard(|| {
        let r = defenses::sor(&as_ref(cloud, "cloud")?.0, &SorConfig { k, alpha })?;
        if !removed.is_null() {
            *removed = r.removed.len();
        }
        emit(out, DupnetCloud(r.cloud))
    })
}

/// Drops `r` uniformly random points.
///
/// # Safety
/// `cloud` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dupnet_srs(
    cloud: *const DupnetCloud,
    r: usize,
    seed: u64,
    out: *mut *mut DupnetCloud,
) -> DupnetStatus {
    guard(|| emit(out, DupnetCloud(defenses::srs(&as_ref(cloud, "cloud")?.0, r, seed)?.cloud)))
}

/// Which set distance [`dupnet_distance`] computes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DupnetDistance {
    /// Max over `a` of the distance to the nearest point of `b`.
    HausdorffDirected = 0,
    /// Symmetric mean of squared nearest-neighbor distances.
    Chamfer = 1,
    /// Mean over `b` of the squared distance to the nearest point of `a`.
    OneSidedChamfer = 2,
    /// Exact Earth Mover's distance per point; sizes must match.
    Emd = 3,
}

/// # Safety
/// `a`, `b` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dupnet_distance(
    a: *const DupnetCloud,
    b: *const DupnetCloud,
    kind: DupnetDistance,
    out: *mut f64,
) -> DupnetStatus {
    guard(|| {
        let (a, b) = (as_ref(a, "a")?.0.points(), as_ref(b, "b")?.0.points());
        if out.is_null() {
            return Err(null("out"));
        }
        *out = match kind {
            DupnetDistance::HausdorffDirected => metrics::hausdorff_directed(a, b)?,
            DupnetDistance::Chamfer => metrics::chamfer(a, b)?,
            DupnetDistance::OneSidedChamfer => metrics::one_sided_chamfer(a, b)?,
            DupnetDistance::Emd => metrics::emd(a, b)?,
        };
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dupnet_classifier_load(
    path: *const c_char,
    out: *mut *mut DupnetClassifier,
) -> DupnetStatus {
    guard(|| {
        let ck = Checkpoint::load(path_arg(path)?)?;
        emit(out, DupnetClassifier(ClassifierParams::from_checkpoint(&ck)?))
    })
}

/// # Safety
/// `cls` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dupnet_classifier_free(cls: *mut DupnetClassifier) {
    if !cls.is_null() {
        drop(Box::from_raw(cls));
    }
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `cls` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dupnet_classifier_num_classes(cls: *const DupnetClassifier) -> usize {
    cls.as_ref().map_or(0, |c| c.0.num_classes())
}

/// Predicted label; `logits` (optional) receives `capacity` >= C scores.
///
/// # Safety
/// Handles must be live; `label` writable; `logits` null or `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn dupnet_classifier_predict(
    cls: *const DupnetClassifier,
    cloud: *const DupnetCloud,
    label: *mut usize,
    logits: *mut f64,
    capacity: usize,
) -> DupnetStatus {
    guard(|| {
        let p = &as_ref(cls, "classifier")?.0;
        let c = &as_ref(cloud, "cloud")?.0;
        if label.is_null() {
            return Err(null("label"));
        }
        let trace = classifier::forward(p, c);
        if !logits.is_null() {
            if capacity < p.num_classes() {
                return Err(Failure(
                    DupnetStatus::BufferTooSmall,
                    format!("logits buffer holds {capacity}, need {}", p.num_classes()),
                ));
            }
            std::slice::from_raw_parts_mut(logits, p.num_classes())
                .copy_from_slice(trace.logits.as_slice().expect("contiguous"));
        }
        *label = trace.predicted();
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dupnet_upsampler_load(path: *const c_char, out: *mut *mut DupnetUpsampler) -> DupnetStatus {
    guard(|| {
        let ck = Checkpoint::load(path_arg(path)?)?;
        emit(out, DupnetUpsampler(UpsamplerParams::from_checkpoint(&ck)?))
    })
}

/// # Safety
/// `up` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dupnet_upsampler_free(up: *mut DupnetUpsampler) {
    if !up.is_null() {
        drop(Box::from_raw(up));
    }
}

/// Upsamples with the learned network when `up` is non-null, otherwise with
/// kNN edge midpoints at `rate` (ignored for the network).
///
/// # Safety
/// `up` null or live; `cloud` live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dupnet_upsample(
    up: *const DupnetUpsampler,
    cloud: *const DupnetCloud,
    rate: usize,
    out: *mut *mut DupnetCloud,
) -> DupnetStatus {
    guard(|| {
        let c = &as_ref(cloud, "cloud")?.0;
        let u = match up.as_ref() {
            Some(u) => Upsampler::Learned(&u.0),
            None => Upsampler::Midpoint { rate },
        };
        emit(out, DupnetCloud(u.apply(c)?))
    })
}

/// Outlier removal followed by upsampling (learned when `up` is non-null).
///
/// # Safety
/// `up` null or live; `cloud` live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dupnet_dup(
    up: *const DupnetUpsampler,
    cloud: *const DupnetCloud,
    k: usize,
    alpha: f64,
    rate: usize,
    out: *mut *mut DupnetCloud,
) -> DupnetStatus {
    guard(|| {
        let c = &as_ref(cloud, "cloud")?.0;
        let u = match up.as_ref() {
            Some(u) => Upsampler::Learned(&u.0),
            None => Upsampler::Midpoint { rate },
        };
        emit(out, DupnetCloud(defenses::dup_pipeline(c, &SorConfig { k, alpha }, u)?))
    })
}
