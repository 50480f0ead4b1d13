//! C ABI over the caneflow library.
//!
//! Every fallible call returns a [`CfStatus`]; on failure the message is kept
//! per thread and read back with [`cf_last_error_message`]. Objects cross the
//! boundary as opaque handles that the caller releases with the matching
//! `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use caneflow::calib::{self, FitPoint};
use caneflow::config::CampaignConfig;
use caneflow::estimator::{self, CellStatistic, EstimatorConfig, PointCloudFrame, Quality, VolumeEstimate};
use caneflow::flow::{self, AccumulateConfig, LowLightPolicy, SpeedPulse, SpeedTrack, SprocketSpec, TransformSpec};
use caneflow::pipeline;
use caneflow::sim::RoiSpec;
use caneflow::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Domain = 3,
    Config = 4,
    Overflow = 5,
    InsufficientData = 6,
    Stream = 7,
    Fit = 8,
    ExcludedLoad = 9,
    Manifest = 10,
    Io = 11,
    Parse = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfQuality {
    Ok = 0,
    LowLight = 1,
    Empty = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfTransform {
    Identity = 0,
    Sqrt = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfLowLight {
    Include = 0,
    Exclude = 1,
}

/// One per-frame volume estimate; `v_c` is m³ per meter of elevator.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfVolumeEstimate {
    pub timestamp: f64,
    pub v_c: f64,
    pub quality: CfQuality,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CfFlowTotals {
    pub volume: f64,
    pub mass_kg: f64,
    pub duration_s: f64,
    pub mass_flow_kg_per_s: f64,
    pub n_frames: usize,
    pub n_low_light: usize,
    pub n_excluded: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CfFit {
    pub slope: f64,
    pub r_squared: f64,
    pub n: usize,
}

/// Campaign configuration handle.
pub struct CfConfig(CampaignConfig);

/// Frame estimator handle: ROI plus estimator settings.
pub struct CfEstimator {
    roi: RoiSpec,
    cfg: EstimatorConfig,
}

/// Streaming accumulator handle: buffered pulses and estimates of one run.
pub struct CfFlow {
    cfg: AccumulateConfig,
    sprocket: SprocketSpec,
    window: f64,
    pulses: Vec<SpeedPulse>,
    estimates: Vec<VolumeEstimate>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CfStatus {
    match e {
        Error::Domain(_) => CfStatus::Domain,
        Error::Config(_) => CfStatus::Config,
        Error::Overflow { .. } => CfStatus::Overflow,
        Error::InsufficientData(_) => CfStatus::InsufficientData,
        Error::Stream(_) => CfStatus::Stream,
        Error::Fit(_) => CfStatus::Fit,
        Error::ExcludedLoad { .. } => CfStatus::ExcludedLoad,
        Error::Manifest(_) => CfStatus::Manifest,
        Error::Io { .. } => CfStatus::Io,
        Error::Parse { .. } => CfStatus::Parse,
    }
}

struct Fail(CfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CfStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CfStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(CfStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn boxed<T>(out: &mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

impl From<CfTransform> for TransformSpec {
    fn from(t: CfTransform) -> Self {
        match t {
            CfTransform::Identity => TransformSpec::Identity,
            CfTransform::Sqrt => TransformSpec::Sqrt,
        }
    }
}

impl From<CfLowLight> for LowLightPolicy {
    fn from(l: CfLowLight) -> Self {
        match l {
            CfLowLight::Include => LowLightPolicy::Include,
            CfLowLight::Exclude => LowLightPolicy::Exclude,
        }
    }
}

impl From<Quality> for CfQuality {
    fn from(q: Quality) -> Self {
        match q {
            Quality::Ok => CfQuality::Ok,
            Quality::LowLight => CfQuality::LowLight,
            Quality::Empty => CfQuality::Empty,
        }
    }
}

impl From<CfQuality> for Quality {
    fn from(q: CfQuality) -> Self {
        match q {
            CfQuality::Ok => Quality::Ok,
            CfQuality::LowLight => Quality::LowLight,
            CfQuality::Empty => Quality::Empty,
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Stable lowercase name of a status code.
#[no_mangle]
pub extern "C" fn cf_status_name(status: CfStatus) -> *const c_char {
    let s: &'static str = match status {
        CfStatus::Ok => "ok\0",
        CfStatus::NullPointer => "null-pointer\0",
        CfStatus::InvalidUtf8 => "invalid-utf8\0",
        CfStatus::Domain => "domain\0",
        CfStatus::Config => "config\0",
        CfStatus::Overflow => "overflow\0",
        CfStatus::InsufficientData => "insufficient-data\0",
        CfStatus::Stream => "stream\0",
        CfStatus::Fit => "fit\0",
        CfStatus::ExcludedLoad => "excluded-load\0",
        CfStatus::Manifest => "manifest\0",
        CfStatus::Io => "io\0",
        CfStatus::Parse => "parse\0",
        CfStatus::BufferTooSmall => "buffer-too-small\0",
        CfStatus::Panic => "panic\0",
    };
    s.as_ptr().cast()
}

/// Applies the volume transform to one `v_c`.
///
/// # Safety
/// `out` must be a valid pointer to a `double`.
#[no_mangle]
pub unsafe extern "C" fn cf_apply_transform(v_c: f64, transform: CfTransform, out: *mut f64) -> CfStatus {
    guard(|| {
        *out_arg(out, "out")? = flow::apply_transform(v_c, transform.into())?;
        Ok(())
    })
}

/// Point yield in kg/m² from mass flow (kg/s), vehicle speed (m/s) and row width (m).
///
/// # Safety
/// `out` must be a valid pointer to a `double`.
#[no_mangle]
pub unsafe extern "C" fn cf_point_yield(m_dot: f64, v_m: f64, w: f64, out: *mut f64) -> CfStatus {
    guard(|| {
        *out_arg(out, "out")? = flow::point_yield(m_dot, v_m, w)?;
        Ok(())
    })
}

/// Coefficient of variation, percent, with the n−1 standard deviation.
///
/// # Safety
/// `values` must point to `n` readable doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_cv(values: *const f64, n: usize, out: *mut f64) -> CfStatus {
    guard(|| {
        let values = slice_arg(values, n, "values")?;
        *out_arg(out, "out")? = calib::cv(values)?;
        Ok(())
    })
}

/// Through-origin least squares of `actual` on `predicted`.
///
/// # Safety
/// `predicted` and `actual` must each point to `n` readable doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_fit_through_origin(
    predicted: *const f64,
    actual: *const f64,
    n: usize,
    out: *mut CfFit,
) -> CfStatus {
    guard(|| {
        let x = slice_arg(predicted, n, "predicted")?;
        let y = slice_arg(actual, n, "actual")?;
        let points: Vec<FitPoint> =
            x.iter().zip(y).map(|(&predicted, &actual)| FitPoint { predicted, actual, overflow: false }).collect();
        let fit = calib::fit_through_origin(&points, false)?;
        *out_arg(out, "out")? = CfFit { slope: fit.slope, r_squared: fit.r_squared, n: fit.n };
        Ok(())
    })
}

/// Loads a built-in campaign, `"lab"` or `"field"`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_config_preset(name: *const c_char, out: *mut *mut CfConfig) -> CfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = CampaignConfig::preset(str_arg(name, "name")?)?;
        boxed(out, CfConfig(cfg));
        Ok(())
    })
}

/// Loads a campaign from a TOML file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_config_load(path: *const c_char, out: *mut *mut CfConfig) -> CfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = CampaignConfig::load(Path::new(str_arg(path, "path")?))?;
        boxed(out, CfConfig(cfg));
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a valid config handle.
#[no_mangle]
pub unsafe extern "C" fn cf_config_set_seed(cfg: *mut CfConfig, seed: u64) -> CfStatus {
    guard(|| {
        out_arg(cfg, "cfg")?.0.seed = seed;
        Ok(())
    })
}

/// Writes the 64-character hex config hash plus NUL into `buf`.
///
/// # Safety
/// `cfg` must be a valid handle; `buf` must hold `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cf_config_hash(cfg: *const CfConfig, buf: *mut c_char, len: usize) -> CfStatus {
    guard(|| {
        let hash = ref_arg(cfg, "cfg")?.0.hash();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < hash.len() + 1 {
            return Err(Fail(CfStatus::BufferTooSmall, format!("hash needs {} bytes, got {len}", hash.len() + 1)));
        }
        ptr::copy_nonoverlapping(hash.as_ptr().cast(), buf, hash.len());
        *buf.add(hash.len()) = 0;
        Ok(())
    })
}

/// Runs simulate, estimate, calibrate and report into `out_dir`.
///
/// # Safety
/// `cfg` must be a valid handle; `out_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cf_pipeline_run(cfg: *const CfConfig, out_dir: *const c_char) -> CfStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        pipeline::run_all(&cfg.0, Path::new(str_arg(out_dir, "out_dir")?))?;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cf_config_free(cfg: *mut CfConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// New estimator over a `width × length` ROI with default settings.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_estimator_new(roi_width: f64, roi_length: f64, out: *mut *mut CfEstimator) -> CfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let roi = RoiSpec::new(roi_width, roi_length)?;
        boxed(out, CfEstimator { roi, cfg: EstimatorConfig::default() });
        Ok(())
    })
}

/// # Safety
/// `est` must be a valid estimator handle.
#[no_mangle]
pub unsafe extern "C" fn cf_estimator_set_cell_size(est: *mut CfEstimator, cell_size: f64) -> CfStatus {
    guard(|| {
        let est = out_arg(est, "est")?;
        let cfg = EstimatorConfig { cell_size, ..est.cfg };
        cfg.validate()?;
        est.cfg = cfg;
        Ok(())
    })
}

/// Reduces cells with a percentile in [0, 100]; a negative value selects the mean.
///
/// # Safety
/// `est` must be a valid estimator handle.
#[no_mangle]
pub unsafe extern "C" fn cf_estimator_set_percentile(est: *mut CfEstimator, percentile: f64) -> CfStatus {
    guard(|| {
        let est = out_arg(est, "est")?;
        let statistic = if percentile < 0.0 { CellStatistic::Mean } else { CellStatistic::Percentile(percentile) };
        let cfg = EstimatorConfig { statistic, ..est.cfg };
        cfg.validate()?;
        est.cfg = cfg;
        Ok(())
    })
}

/// # Safety
/// `est` must be a valid estimator handle.
#[no_mangle]
pub unsafe extern "C" fn cf_estimator_set_lux_gate(est: *mut CfEstimator, lux_gate: f64) -> CfStatus {
    guard(|| {
        let est = out_arg(est, "est")?;
        let cfg = EstimatorConfig { lux_gate, ..est.cfg };
        cfg.validate()?;
        est.cfg = cfg;
        Ok(())
    })
}

/// Estimates one frame. `xyz` holds `n_points` interleaved x, y, z triples in meters.
///
/// # Safety
/// `est` must be valid; `xyz` must point to `3 × n_points` readable doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_estimator_estimate(
    est: *const CfEstimator,
    timestamp: f64,
    lux: f64,
    xyz: *const f64,
    n_points: usize,
    out: *mut CfVolumeEstimate,
) -> CfStatus {
    guard(|| {
        let est = ref_arg(est, "est")?;
        let n = n_points.checked_mul(3).ok_or_else(|| Fail(CfStatus::Domain, "n_points too large".into()))?;
        let coords = slice_arg(xyz, n, "xyz")?;
        let out = out_arg(out, "out")?;
        let frame = PointCloudFrame { timestamp, lux, points: coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() };
        let e = estimator::estimate_frame(&frame, &est.roi, &est.cfg)?;
        *out = CfVolumeEstimate { timestamp: e.frame_timestamp, v_c: e.v_c, quality: e.quality.into() };
        Ok(())
    })
}

/// # Safety
/// `est` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cf_estimator_free(est: *mut CfEstimator) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// New accumulator for one run. `density` is kg per transformed volume unit;
/// `frame_rate` sets the trailing Δt of the last frame.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_flow_new(
    density: f64,
    transform: CfTransform,
    low_light: CfLowLight,
    frame_rate: f64,
    out: *mut *mut CfFlow,
) -> CfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if density.is_nan() || density <= 0.0 || !density.is_finite() {
            return Err(Fail(CfStatus::Domain, format!("density must be positive, got {density}")));
        }
        if frame_rate.is_nan() || frame_rate <= 0.0 {
            return Err(Fail(CfStatus::Config, format!("frame rate must be positive, got {frame_rate}")));
        }
        let cfg = AccumulateConfig { density, transform: transform.into(), low_light: low_light.into(), frame_rate };
        boxed(
            out,
            CfFlow {
                cfg,
                sprocket: SprocketSpec::default(),
                window: flow::DEFAULT_SPEED_WINDOW,
                pulses: Vec::new(),
                estimates: Vec::new(),
            },
        );
        Ok(())
    })
}

/// Sets the sprocket geometry used to turn pulses into chain speed.
///
/// # Safety
/// `flow` must be a valid accumulator handle.
#[no_mangle]
pub unsafe extern "C" fn cf_flow_set_sprocket(flow: *mut CfFlow, pulses_per_rev: u32, circumference: f64) -> CfStatus {
    guard(|| {
        let flow = out_arg(flow, "flow")?;
        let spec = SprocketSpec { pulses_per_rev, circumference };
        spec.validate()?;
        flow.sprocket = spec;
        Ok(())
    })
}

/// Appends a cumulative pulse count record.
///
/// # Safety
/// `flow` must be a valid accumulator handle.
#[no_mangle]
pub unsafe extern "C" fn cf_flow_push_pulse(flow: *mut CfFlow, timestamp: f64, count: u64) -> CfStatus {
    guard(|| {
        out_arg(flow, "flow")?.pulses.push(SpeedPulse { timestamp, count });
        Ok(())
    })
}

/// Appends a frame estimate; frames must arrive in time order.
///
/// # Safety
/// `flow` must be a valid accumulator handle.
#[no_mangle]
pub unsafe extern "C" fn cf_flow_push_estimate(flow: *mut CfFlow, estimate: CfVolumeEstimate) -> CfStatus {
    guard(|| {
        out_arg(flow, "flow")?.estimates.push(VolumeEstimate {
            frame_timestamp: estimate.timestamp,
            v_c: estimate.v_c,
            quality: estimate.quality.into(),
        });
        Ok(())
    })
}

/// Folds the buffered run into totals.
///
/// # Safety
/// `flow` must be a valid handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_flow_totals(flow: *const CfFlow, out: *mut CfFlowTotals) -> CfStatus {
    guard(|| {
        let flow = ref_arg(flow, "flow")?;
        let out = out_arg(out, "out")?;
        let track = SpeedTrack::new(flow.pulses.clone(), flow.sprocket, flow.window)?;
        let (_, t) = flow::accumulate(&flow.estimates, &track, &flow.cfg)?;
        *out = CfFlowTotals {
            volume: t.volume,
            mass_kg: t.mass,
            duration_s: t.duration,
            mass_flow_kg_per_s: t.mass_flow(),
            n_frames: t.n_frames,
            n_low_light: t.n_low_light,
            n_excluded: t.n_excluded,
        };
        Ok(())
    })
}

/// # Safety
/// `flow` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cf_flow_free(flow: *mut CfFlow) {
    if !flow.is_null() {
        drop(Box::from_raw(flow));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(cf_last_error_message()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn scalar_calls_and_errors() {
        let mut y = 0.0;
        assert_eq!(unsafe { cf_point_yield(30.0, 1.5, 1.8, &mut y) }, CfStatus::Ok);
        assert!((y - 30.0 / 2.7).abs() < 1e-12);
        assert_eq!(unsafe { cf_point_yield(30.0, 0.0, 1.8, &mut y) }, CfStatus::Domain);
        assert!(last_error().contains("vehicle speed"));
        assert_eq!(unsafe { cf_apply_transform(0.25, CfTransform::Sqrt, ptr::null_mut()) }, CfStatus::NullPointer);
        let mut t = 0.0;
        assert_eq!(unsafe { cf_apply_transform(0.25, CfTransform::Sqrt, &mut t) }, CfStatus::Ok);
        assert_eq!(t, 0.5);
    }

    #[test]
    fn status_names_are_terminated() {
        let name = unsafe { CStr::from_ptr(cf_status_name(CfStatus::InsufficientData)) };
        assert_eq!(name.to_str().unwrap(), "insufficient-data");
        let v = unsafe { CStr::from_ptr(cf_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn hash_needs_room() {
        let mut cfg = ptr::null_mut();
        assert_eq!(unsafe { cf_config_preset(c"lab".as_ptr(), &mut cfg) }, CfStatus::Ok);
        let mut small = [0 as c_char; 10];
        assert_eq!(unsafe { cf_config_hash(cfg, small.as_mut_ptr(), small.len()) }, CfStatus::BufferTooSmall);
        let mut buf = [0 as c_char; 65];
        assert_eq!(unsafe { cf_config_hash(cfg, buf.as_mut_ptr(), buf.len()) }, CfStatus::Ok);
        let hex = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
        assert_eq!(hex, unsafe { &*cfg }.0.hash());
        unsafe { cf_config_free(cfg) };
    }

    #[test]
    fn unknown_preset_is_a_config_error() {
        let mut cfg = ptr::null_mut();
        assert_eq!(unsafe { cf_config_preset(c"orchard".as_ptr(), &mut cfg) }, CfStatus::Config);
        assert!(cfg.is_null());
    }
}
