//! C ABI over `viewstab-core`.
//!
//! Every fallible call returns a [`VsStatus`]; on failure the message is
//! available from [`vs_last_error_message`] on the same thread. Datasets are
//! opaque handles created by [`vs_dataset_load`] and released with
//! [`vs_dataset_free`].

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;
use std::slice;

use viewstab_core::agreement::iou;
use viewstab_core::instability::{default_radius, instability_scores, percentile_nearest_rank, ScoringConfig};
use viewstab_core::io::{load_dataset, LoadOptions};
use viewstab_core::model::{feature_distance, pose_distance, Dataset, Pose};
use viewstab_core::pipeline::{run_pipeline, write_reports, PipelineConfig, PipelineInputs};
use viewstab_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Validation = 3,
    Io = 4,
    Numerical = 5,
    OutOfRange = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

/// Opaque dataset handle.
pub struct VsDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: VsStatus, msg: impl Into<String>) -> VsStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> VsStatus {
    match e {
        Error::Stage { source, .. } => status_of(source),
        Error::Io { .. } => VsStatus::Io,
        Error::InvalidArgument(_) | Error::UnknownFeaturizer(_) | Error::DimensionMismatch { .. } => {
            VsStatus::InvalidArgument
        }
        Error::NotConverged { .. }
        | Error::ClustersCollapsed
        | Error::TooFewUnstable(_)
        | Error::SilhouetteUndefined(_)
        | Error::DegenerateTrainingSet(_)
        | Error::NoScorableViews => VsStatus::Numerical,
        e if e.is_validation() => VsStatus::Validation,
        _ => VsStatus::Internal,
    }
}

fn from_error(e: Error) -> VsStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn guard(f: impl FnOnce() -> VsStatus) -> VsStatus {
    clear_error();
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(VsStatus::Internal, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, VsStatus> {
    if p.is_null() {
        return Err(fail(VsStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(VsStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn vs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a manifest and its blobs. On success `*out` owns a handle that must
/// be released with [`vs_dataset_free`].
///
/// # Safety
/// `manifest_path` must be a NUL-terminated string and `out` a writable
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_dataset_load(
    manifest_path: *const c_char,
    normalize: bool,
    out: *mut *mut VsDataset,
) -> VsStatus {
    guard(|| {
        if out.is_null() {
            return fail(VsStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = tri!(str_arg(manifest_path, "manifest_path"));
        match load_dataset(Path::new(path), LoadOptions { normalize }) {
            Ok(d) => {
                *out = Box::into_raw(Box::new(VsDataset { inner: d }));
                VsStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `dataset` must be NULL or a handle from [`vs_dataset_load`] that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn vs_dataset_free(dataset: *mut VsDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

unsafe fn dataset_ref<'a>(d: *const VsDataset) -> Result<&'a Dataset, VsStatus> {
    d.as_ref()
        .map(|d| &d.inner)
        .ok_or_else(|| fail(VsStatus::NullPointer, "dataset is null"))
}

/// # Safety
/// `dataset` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_dataset_scene_count(dataset: *const VsDataset, out: *mut usize) -> VsStatus {
    guard(|| {
        let d = tri!(dataset_ref(dataset));
        if out.is_null() {
            return fail(VsStatus::NullPointer, "out is null");
        }
        *out = d.scenes().len();
        VsStatus::Ok
    })
}

/// Number of views in scene `scene_index`.
///
/// # Safety
/// `dataset` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_dataset_view_count(
    dataset: *const VsDataset,
    scene_index: usize,
    out: *mut usize,
) -> VsStatus {
    guard(|| {
        let d = tri!(dataset_ref(dataset));
        if out.is_null() {
            return fail(VsStatus::NullPointer, "out is null");
        }
        match d.scenes().get(scene_index) {
            Some(s) => {
                *out = s.len();
                VsStatus::Ok
            }
            None => fail(
                VsStatus::OutOfRange,
                format!("scene index {scene_index} out of range ({} scenes)", d.scenes().len()),
            ),
        }
    })
}

/// Instability scores for one scene. A `radius` of zero or less derives the
/// radius from view spacing. Views without pose neighbours get NaN.
///
/// # Safety
/// `dataset` must be a live handle, `featurizer_id` NUL-terminated, and `out`
/// must point to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn vs_instability_scores(
    dataset: *const VsDataset,
    featurizer_id: *const c_char,
    scene_index: usize,
    radius: f64,
    angle_weight: f64,
    out: *mut f64,
    out_len: usize,
) -> VsStatus {
    guard(|| {
        let d = tri!(dataset_ref(dataset));
        let fid = tri!(str_arg(featurizer_id, "featurizer_id"));
        if out.is_null() {
            return fail(VsStatus::NullPointer, "out is null");
        }
        let Some(scene) = d.scenes().get(scene_index) else {
            return fail(VsStatus::OutOfRange, format!("scene index {scene_index} out of range"));
        };
        if out_len < scene.len() {
            return fail(
                VsStatus::BufferTooSmall,
                format!("need {} slots, got {out_len}", scene.len()),
            );
        }
        let radius = if radius > 0.0 {
            radius
        } else {
            tri!(default_radius(d, angle_weight).map_err(from_error))
        };
        let cfg = ScoringConfig {
            angle_weight,
            ..ScoringConfig::new(radius)
        };
        if let Err(e) = cfg.validate() {
            return from_error(e);
        }
        let scores = tri!(instability_scores(scene, fid, &cfg).map_err(from_error));
        let dst = slice::from_raw_parts_mut(out, scene.len());
        for (o, s) in dst.iter_mut().zip(scores) {
            *o = s.unwrap_or(f64::NAN);
        }
        VsStatus::Ok
    })
}

/// Cosine distance between two `dims`-long vectors.
///
/// # Safety
/// `x` and `y` must each point to `dims` readable floats; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_feature_distance(x: *const f32, y: *const f32, dims: usize, out: *mut f64) -> VsStatus {
    guard(|| {
        if x.is_null() || y.is_null() || out.is_null() {
            return fail(VsStatus::NullPointer, "null argument");
        }
        if dims == 0 {
            return fail(VsStatus::InvalidArgument, "dims must be positive");
        }
        let (a, b) = (slice::from_raw_parts(x, dims), slice::from_raw_parts(y, dims));
        match feature_distance(a, b) {
            Ok(v) => {
                *out = v;
                VsStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Angular distance in degrees between two turntable poses.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vs_pose_distance_turntable(
    azimuth_a: f64,
    elevation_a: f64,
    azimuth_b: f64,
    elevation_b: f64,
    out: *mut f64,
) -> VsStatus {
    guard(|| {
        if out.is_null() {
            return fail(VsStatus::NullPointer, "out is null");
        }
        let a = tri!(Pose::turntable(azimuth_a, elevation_a).map_err(from_error));
        let b = tri!(Pose::turntable(azimuth_b, elevation_b).map_err(from_error));
        match pose_distance(&a, &b, 1.0) {
            Ok(v) => {
                *out = v;
                VsStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Nearest-rank percentile of `n` values.
///
/// # Safety
/// `values` must point to `n` readable doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_percentile_threshold(
    values: *const f64,
    n: usize,
    percentile: f64,
    out: *mut f64,
) -> VsStatus {
    guard(|| {
        if out.is_null() || (values.is_null() && n > 0) {
            return fail(VsStatus::NullPointer, "null argument");
        }
        let v = if n == 0 { &[][..] } else { slice::from_raw_parts(values, n) };
        if v.iter().any(|x| !x.is_finite()) {
            return fail(VsStatus::InvalidArgument, "values must be finite");
        }
        match percentile_nearest_rank(v, percentile) {
            Ok(t) => {
                *out = t;
                VsStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// IoU of two id sets; duplicates within one array are ignored.
///
/// # Safety
/// `a` and `b` must point to `na` and `nb` readable ids (NULL allowed when
/// the count is zero); `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_iou(a: *const u64, na: usize, b: *const u64, nb: usize, out: *mut f64) -> VsStatus {
    guard(|| {
        if out.is_null() || (a.is_null() && na > 0) || (b.is_null() && nb > 0) {
            return fail(VsStatus::NullPointer, "null argument");
        }
        let set = |p: *const u64, n: usize| -> BTreeSet<u64> {
            if n == 0 {
                BTreeSet::new()
            } else {
                slice::from_raw_parts(p, n).iter().copied().collect()
            }
        };
        *out = iou(&set(a, na), &set(b, nb));
        VsStatus::Ok
    })
}

/// Runs every stage that needs no side inputs and writes the report bundle
/// to `out_dir`. `workers` of zero uses every core.
///
/// # Safety
/// `dataset` must be a live handle and `out_dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vs_run_pipeline(
    dataset: *const VsDataset,
    out_dir: *const c_char,
    seed: u64,
    workers: usize,
) -> VsStatus {
    guard(|| {
        let d = tri!(dataset_ref(dataset));
        let dir = tri!(str_arg(out_dir, "out_dir"));
        let cfg = PipelineConfig {
            seed,
            ..PipelineConfig::default()
        };
        let bundle = tri!(run_pipeline(d, &cfg, &PipelineInputs::default(), workers).map_err(from_error));
        match write_reports(&bundle, Path::new(dir)) {
            Ok(_) => VsStatus::Ok,
            Err(e) => from_error(e),
        }
    })
}
