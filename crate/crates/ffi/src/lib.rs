//! C ABI over `dvps-core`.
//!
//! Every fallible function returns a [`DvpsStatus`]; on failure the message
//! is available from [`dvps_last_error_message`] on the same thread. Objects
//! are opaque handles created by `*_open`/`*_load`/`*_generate` functions and
//! released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use dvps::datamodel::{load_panoptic, save_panoptic, PanopticVideo, Stage};
use dvps::matcher::hungarian_padded;
use dvps::metrics::{vpq_mean, MetricReport, VPQ_WINDOWS};
use dvps::numerics::Tensor;
use dvps::pipeline::{
    generate_dataset, infer_video, load_dataset, save_dataset, DatasetConfig, InferConfig,
    Manifest, Models, VideoSample,
};
use dvps::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DvpsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    OutOfRange = 3,
    BufferTooSmall = 4,
    Config = 5,
    Invalid = 6,
    Format = 7,
    Integrity = 8,
    Missing = 9,
    Io = 10,
    Shape = 11,
    NonFinite = 12,
    Divergence = 13,
    Panic = 14,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DvpsStage {
    Prematch = 0,
    Tracker = 1,
    Refiner = 2,
}

impl From<DvpsStage> for Stage {
    fn from(s: DvpsStage) -> Stage {
        match s {
            DvpsStage::Prematch => Stage::Prematch,
            DvpsStage::Tracker => Stage::Tracker,
            DvpsStage::Refiner => Stage::Refiner,
        }
    }
}

/// Dataset-level scores. VPQ values are percentages, the rest fractions.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DvpsMetrics {
    pub vpq1: f64,
    pub vpq2: f64,
    pub vpq4: f64,
    pub vpq6: f64,
    pub vpq: f64,
    pub stq: f64,
    pub association_accuracy: f64,
}

/// Segmenter outputs, pixel features and ground truth of a set of videos.
pub struct DvpsDataset {
    manifest: Manifest,
    samples: Vec<VideoSample>,
}

/// Trained stages for inference.
pub struct DvpsModels {
    stage: Stage,
    models: Models,
}

/// Panoptic id maps of one video.
pub struct DvpsVideo(PanopticVideo);

struct Failure {
    status: DvpsStatus,
    message: String,
}

impl Failure {
    fn new(status: DvpsStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => DvpsStatus::Config,
            Error::Invalid(_) => DvpsStatus::Invalid,
            Error::UnrecognizedFormat(_)
            | Error::Truncated { .. }
            | Error::ExtentOverflow(_)
            | Error::Json { .. } => DvpsStatus::Format,
            Error::Integrity(_) => DvpsStatus::Integrity,
            Error::Missing(_) => DvpsStatus::Missing,
            Error::Io { .. } => DvpsStatus::Io,
            Error::Shape { .. } => DvpsStatus::Shape,
            Error::NonFinite { .. } => DvpsStatus::NonFinite,
            Error::Divergence { .. } => DvpsStatus::Divergence,
        };
        Failure::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DvpsStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| p.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        Err(Failure::new(DvpsStatus::Panic, msg))
    });
    match outcome {
        Ok(()) => {
            set_last_error("");
            DvpsStatus::Ok
        }
        Err(f) => {
            set_last_error(&f.message);
            f.status
        }
    }
}

fn null(name: &str) -> Failure {
    Failure::new(DvpsStatus::NullPointer, format!("{name} is NULL"))
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn string(p: *const c_char, name: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure::new(DvpsStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn optional_path(p: *const c_char, name: &str) -> Result<Option<PathBuf>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        string(p, name).map(|s| Some(PathBuf::from(s)))
    }
}

unsafe fn put<T>(out: *mut *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(name));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn dvps_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dvps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a dataset directory written by `dvps gen-data`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dvps_dataset_open(
    dir: *const c_char,
    out: *mut *mut DvpsDataset,
) -> DvpsStatus {
    guard(|| {
        let dir = string(dir, "dir")?;
        let (manifest, samples) = load_dataset(dir.as_ref())?;
        put(out, DvpsDataset { manifest, samples }, "out")
    })
}

/// Generates a synthetic dataset in memory. `config_json` holds a dataset
/// configuration (`num_videos`, `seed`, `scene`); NULL selects defaults.
///
/// # Safety
/// `config_json` must be NULL or a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dvps_dataset_generate(
    config_json: *const c_char,
    out: *mut *mut DvpsDataset,
) -> DvpsStatus {
    guard(|| {
        let cfg: DatasetConfig = if config_json.is_null() {
            DatasetConfig::default()
        } else {
            serde_json::from_str(&string(config_json, "config_json")?)
                .map_err(|e| Failure::new(DvpsStatus::Config, e.to_string()))?
        };
        let (manifest, samples) = generate_dataset(&cfg)?;
        put(out, DvpsDataset { manifest, samples }, "out")
    })
}

/// Writes the dataset in the on-disk layout read by [`dvps_dataset_open`].
///
/// # Safety
/// `dataset` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dvps_dataset_save(
    dataset: *const DvpsDataset,
    dir: *const c_char,
) -> DvpsStatus {
    guard(|| {
        let ds = deref(dataset, "dataset")?;
        let dir = string(dir, "dir")?;
        save_dataset(dir.as_ref(), &ds.manifest, &ds.samples)?;
        Ok(())
    })
}

/// Number of videos; 0 for NULL.
///
/// # Safety
/// `dataset` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn dvps_dataset_len(dataset: *const DvpsDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.samples.len())
}

unsafe fn sample<'a>(
    dataset: *const DvpsDataset,
    index: usize,
) -> Result<(&'a DvpsDataset, &'a VideoSample), Failure> {
    let ds = deref(dataset, "dataset")?;
    let s = ds.samples.get(index).ok_or_else(|| {
        Failure::new(
            DvpsStatus::OutOfRange,
            format!("video {index} of {}", ds.samples.len()),
        )
    })?;
    Ok((ds, s))
}

/// Copy of the ground truth of video `index`.
///
/// # Safety
/// `dataset` must come from this library and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn dvps_dataset_ground_truth(
    dataset: *const DvpsDataset,
    index: usize,
    out: *mut *mut DvpsVideo,
) -> DvpsStatus {
    guard(|| {
        let (_, s) = sample(dataset, index)?;
        put(out, DvpsVideo(s.gt.clone()), "out")
    })
}

/// # Safety
/// `dataset` must be NULL or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn dvps_dataset_free(dataset: *mut DvpsDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Loads the checkpoints `stage` needs: none for prematch, a tracker
/// checkpoint for tracker, a refiner checkpoint for refiner. Unused paths
/// may be NULL.
///
/// # Safety
/// Paths must be NULL or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dvps_models_load(
    stage: DvpsStage,
    tracker_ckpt: *const c_char,
    refiner_ckpt: *const c_char,
    out: *mut *mut DvpsModels,
) -> DvpsStatus {
    guard(|| {
        let stage = Stage::from(stage);
        let t = optional_path(tracker_ckpt, "tracker_ckpt")?;
        let r = optional_path(refiner_ckpt, "refiner_ckpt")?;
        let models = dvps::cli::load_models(stage, t.as_deref(), r.as_deref())?;
        put(out, DvpsModels { stage, models }, "out")
    })
}

/// # Safety
/// `models` must be NULL or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn dvps_models_free(models: *mut DvpsModels) {
    if !models.is_null() {
        drop(Box::from_raw(models));
    }
}

/// Runs the loaded stage on video `index` and fuses a panoptic video.
/// `scales` lists resolution factors; NULL or an empty list means 1.0.
///
/// # Safety
/// Handles must come from this library; `scales` must hold `num_scales`
/// values when non-NULL; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dvps_infer(
    dataset: *const DvpsDataset,
    index: usize,
    models: *const DvpsModels,
    scales: *const f64,
    num_scales: usize,
    out: *mut *mut DvpsVideo,
) -> DvpsStatus {
    guard(|| {
        let (ds, s) = sample(dataset, index)?;
        let m = deref(models, "models")?;
        let mut cfg = InferConfig {
            stage: m.stage,
            ..InferConfig::default()
        };
        if !scales.is_null() && num_scales > 0 {
            cfg.scales = std::slice::from_raw_parts(scales, num_scales).to_vec();
        }
        let video = infer_video(
            &s.queries,
            &s.clip,
            &m.models,
            ds.manifest.num_thing_classes(),
            &cfg,
        )?;
        put(out, DvpsVideo(video), "out")
    })
}

/// Reads a panoptic video directory (annotation plus frame maps).
///
/// # Safety
/// `dir` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dvps_video_load(
    dir: *const c_char,
    out: *mut *mut DvpsVideo,
) -> DvpsStatus {
    guard(|| {
        let dir = string(dir, "dir")?;
        let v = load_panoptic(dir.as_ref())?;
        put(out, DvpsVideo(v), "out")
    })
}

/// # Safety
/// `video` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dvps_video_save(
    video: *const DvpsVideo,
    dir: *const c_char,
) -> DvpsStatus {
    guard(|| {
        let v = deref(video, "video")?;
        let dir = string(dir, "dir")?;
        save_panoptic(dir.as_ref(), &v.0)?;
        Ok(())
    })
}

/// # Safety
/// `video` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn dvps_video_num_frames(video: *const DvpsVideo) -> usize {
    video.as_ref().map_or(0, |v| v.0.num_frames())
}

/// # Safety
/// `video` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn dvps_video_height(video: *const DvpsVideo) -> usize {
    video.as_ref().map_or(0, |v| v.0.height())
}

/// # Safety
/// `video` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn dvps_video_width(video: *const DvpsVideo) -> usize {
    video.as_ref().map_or(0, |v| v.0.width())
}

/// Copies frame `t` as row-major segment ids (0 is void) into `ids`, which
/// must hold at least height*width values.
///
/// # Safety
/// `video` must come from this library; `ids` must point to `capacity`
/// writable values.
#[no_mangle]
pub unsafe extern "C" fn dvps_video_frame_ids(
    video: *const DvpsVideo,
    t: usize,
    ids: *mut u32,
    capacity: usize,
) -> DvpsStatus {
    guard(|| {
        let v = &deref(video, "video")?.0;
        if t >= v.num_frames() {
            return Err(Failure::new(
                DvpsStatus::OutOfRange,
                format!("frame {t} of {}", v.num_frames()),
            ));
        }
        let frame = v.frame(t);
        let (h, w) = (v.height(), v.width());
        if capacity < h * w {
            return Err(Failure::new(
                DvpsStatus::BufferTooSmall,
                format!("frame has {} pixels, buffer {capacity}", h * w),
            ));
        }
        if ids.is_null() {
            return Err(null("ids"));
        }
        let dst = std::slice::from_raw_parts_mut(ids, h * w);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = frame.get(y, x);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `video` must be NULL or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn dvps_video_free(video: *mut DvpsVideo) {
    if !video.is_null() {
        drop(Box::from_raw(video));
    }
}

/// Scores `count` prediction/ground-truth pairs, pooling statistics over
/// all of them.
///
/// # Safety
/// `predictions` and `ground_truth` must each point to `count` handles from
/// this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dvps_evaluate(
    predictions: *const *const DvpsVideo,
    ground_truth: *const *const DvpsVideo,
    count: usize,
    out: *mut DvpsMetrics,
) -> DvpsStatus {
    guard(|| {
        if predictions.is_null() {
            return Err(null("predictions"));
        }
        if ground_truth.is_null() {
            return Err(null("ground_truth"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = std::slice::from_raw_parts(predictions, count);
        let g = std::slice::from_raw_parts(ground_truth, count);
        let pairs = p
            .iter()
            .zip(g)
            .enumerate()
            .map(|(i, (&p, &g))| {
                let p = deref(p, "prediction")?;
                let g = deref(g, "ground truth")?;
                Ok((format!("{i}"), p.0.clone(), g.0.clone()))
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        let r = MetricReport::evaluate(&pairs)?;
        let k = |k: usize| r.vpq_per_k[&k];
        *out = DvpsMetrics {
            vpq1: k(1),
            vpq2: k(2),
            vpq4: k(4),
            vpq6: k(6),
            vpq: r.vpq_mean,
            stq: r.stq,
            association_accuracy: r.association_accuracy,
        };
        Ok(())
    })
}

/// Mean of the four VPQ_k scores for k = 1, 2, 4, 6.
///
/// # Safety
/// `scores` must point to 4 values and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn dvps_vpq_mean(scores: *const f64, out: *mut f64) -> DvpsStatus {
    guard(|| {
        if scores.is_null() {
            return Err(null("scores"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let s = std::slice::from_raw_parts(scores, VPQ_WINDOWS.len());
        let per_k = VPQ_WINDOWS.iter().copied().zip(s.iter().copied()).collect();
        *out = vpq_mean(&per_k)?;
        Ok(())
    })
}

/// Minimum-cost assignment of each of `rows` rows of the row-major `cost`
/// matrix to a distinct column (`rows <= cols`). Writes the column of each
/// row to `assignment` and the total to `total_cost` (which may be NULL).
///
/// # Safety
/// `cost` must hold rows*cols values and `assignment` room for `rows`.
#[no_mangle]
pub unsafe extern "C" fn dvps_hungarian(
    cost: *const f64,
    rows: usize,
    cols: usize,
    assignment: *mut usize,
    total_cost: *mut f64,
) -> DvpsStatus {
    guard(|| {
        if cost.is_null() {
            return Err(null("cost"));
        }
        if assignment.is_null() {
            return Err(null("assignment"));
        }
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure::new(DvpsStatus::Invalid, "matrix size overflows"))?;
        let c = Tensor::new([rows, cols], std::slice::from_raw_parts(cost, n).to_vec())?;
        let a = hungarian_padded(&c)?;
        std::slice::from_raw_parts_mut(assignment, rows).copy_from_slice(&a.perm);
        if !total_cost.is_null() {
            *total_cost = a.cost;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(dvps_last_error_message()) }
            .to_string_lossy()
            .into_owned()
    }

    #[test]
    fn null_arguments_are_reported() {
        let mut out = ptr::null_mut();
        let s = unsafe { dvps_dataset_open(ptr::null(), &mut out) };
        assert_eq!(s, DvpsStatus::NullPointer);
        assert!(last_error().contains("dir"));
        assert!(out.is_null());
        assert_eq!(unsafe { dvps_dataset_len(ptr::null()) }, 0);
    }

    #[test]
    fn core_errors_map_to_statuses() {
        let bad = CString::new(r#"{"num_videos": 1, "bogus": 2}"#).unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(
            unsafe { dvps_dataset_generate(bad.as_ptr(), &mut out) },
            DvpsStatus::Config
        );
        let missing = CString::new("/nonexistent/dvps").unwrap();
        let s = unsafe { dvps_dataset_open(missing.as_ptr(), &mut out) };
        assert!(matches!(s, DvpsStatus::Io | DvpsStatus::Missing), "{s:?}");
        let mut models = ptr::null_mut();
        let s =
            unsafe { dvps_models_load(DvpsStage::Tracker, ptr::null(), ptr::null(), &mut models) };
        assert_eq!(s, DvpsStatus::Missing);
        assert!(last_error().contains("tracker"));
    }

    #[test]
    fn hungarian_rectangular() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0];
        let mut perm = [9usize; 2];
        let mut total = 0.0;
        let s = unsafe { dvps_hungarian(cost.as_ptr(), 2, 3, perm.as_mut_ptr(), &mut total) };
        assert_eq!(s, DvpsStatus::Ok);
        assert_eq!(perm, [1, 0]);
        assert_eq!(total, 3.0);
        let s = unsafe { dvps_hungarian(cost.as_ptr(), 3, 2, perm.as_mut_ptr(), ptr::null_mut()) };
        assert_eq!(s, DvpsStatus::Invalid);
        let nan = [f64::NAN];
        let s = unsafe { dvps_hungarian(nan.as_ptr(), 1, 1, perm.as_mut_ptr(), ptr::null_mut()) };
        assert_eq!(s, DvpsStatus::NonFinite);
    }

    #[test]
    fn vpq_mean_of_table_rows() {
        let mut m = 0.0;
        let s = unsafe { dvps_vpq_mean([54.7, 54.1, 53.3, 52.8].as_ptr(), &mut m) };
        assert_eq!(s, DvpsStatus::Ok);
        assert!((m - 53.725).abs() < 1e-12);
    }
}
