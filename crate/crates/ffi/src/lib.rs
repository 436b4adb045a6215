//! C ABI over the cyclemorph engine.
//!
//! Every function returns a [`CmStatus`]. On failure the message is kept per
//! thread and can be read with [`cm_last_error_message`]. Panics never cross
//! the boundary; they come back as `CM_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cyclemorph::cli::{load_trained, TrainedModels};
use cyclemorph::losses::{local_ncc_value, HyperParams, Normalization};
use cyclemorph::metrics::{dice, folding_percentage, tre, JacobianMode, LabelMap, LandmarkSet};
use cyclemorph::multiscale::register_multiscale;
use cyclemorph::warp::{spatial_transform, DisplacementField, Image};
use cyclemorph::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Runtime = 5,
    Panic = 6,
}

/// Trained networks loaded from a training output directory.
pub struct CmModel {
    inner: TrainedModels,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(CmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } => CmStatus::Io,
            Error::Format { .. } | Error::Json(_) | Error::CheckpointMismatch { .. } => CmStatus::Format,
            Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => CmStatus::InvalidArgument,
            _ => CmStatus::Runtime,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CmStatus::NullPointer, format!("{what} is null"))
}

fn bad(msg: impl Into<String>) -> Fail {
    Fail(CmStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CmStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CmStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or point to `len` readable elements.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn lattice_of(lattice: *const usize, rank: usize) -> Result<Vec<usize>, Fail> {
    if !(2..=3).contains(&rank) {
        return Err(bad(format!("rank must be 2 or 3, got {rank}")));
    }
    let l = slice(lattice, rank, "lattice")?.to_vec();
    if l.contains(&0) {
        return Err(bad("lattice extents must be positive"));
    }
    Ok(l)
}

unsafe fn image_from(ptr: *const f32, lattice: &[usize], what: &str) -> Result<Image, Fail> {
    let n = lattice.iter().product();
    Ok(Image::from_values(lattice, slice(ptr, n, what)?.to_vec())?)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn cm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads the networks written by `cyclemorph train --out DIR`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cm_model_load(dir: *const c_char, out: *mut *mut CmModel) -> CmStatus {
    guard(|| {
        if dir.is_null() {
            return Err(null("dir"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = CStr::from_ptr(dir).to_str().map_err(|_| bad("dir is not UTF-8"))?;
        let inner = load_trained(Path::new(dir))?;
        *out = Box::into_raw(Box::new(CmModel { inner }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from `cm_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cm_model_free(model: *mut CmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Spatial rank the model was trained for (2 or 3).
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cm_model_rank(model: *const CmModel, out: *mut usize) -> CmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.inner.global.gx.config.rank;
        Ok(())
    })
}

/// Whether the model carries a local network for multiscale registration.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cm_model_has_local(model: *const CmModel, out: *mut bool) -> CmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.inner.local.is_some();
        Ok(())
    })
}

/// Registers `moving` onto `fixed`, both single-channel row-major volumes of
/// extent `lattice[0..rank]`. Writes the deformed image (n values) and the
/// displacement field (rank * n values, component-major) when the output
/// pointers are non-null.
///
/// # Safety
/// Input pointers must reference the stated number of elements; non-null
/// outputs must be writable for their sizes.
#[no_mangle]
pub unsafe extern "C" fn cm_register(
    model: *const CmModel,
    moving: *const f32,
    fixed: *const f32,
    lattice: *const usize,
    rank: usize,
    multiscale: bool,
    deformed_out: *mut f32,
    field_out: *mut f32,
) -> CmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let lattice = lattice_of(lattice, rank)?;
        let moving = image_from(moving, &lattice, "moving")?;
        let fixed = image_from(fixed, &lattice, "fixed")?;
        let models = &m.inner;
        let (deformed, phi) = if multiscale {
            let local = models.local.as_ref().ok_or_else(|| bad("model has no local network"))?;
            let out = register_multiscale(&models.global.gx, &local.gx, &moving, &fixed, &models.run.train.multiscale)?;
            (out.deformed, out.phi_final)
        } else {
            models.global.gx.config.check_lattice(&lattice)?;
            let phi = models.global.gx.predict(&moving, &fixed)?;
            (spatial_transform(&moving, &phi)?, phi)
        };
        if !deformed_out.is_null() {
            let src = deformed.tensor().data();
            std::slice::from_raw_parts_mut(deformed_out, src.len()).copy_from_slice(src);
        }
        if !field_out.is_null() {
            let src = phi.tensor().data();
            std::slice::from_raw_parts_mut(field_out, src.len()).copy_from_slice(src);
        }
        Ok(())
    })
}

/// Percentage of interior voxels whose mapping Jacobian determinant is <= 0.
///
/// # Safety
/// `field` must hold rank * prod(lattice) values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_folding_percentage(field: *const f32, lattice: *const usize, rank: usize, out: *mut f64) -> CmStatus {
    guard(|| {
        let lattice = lattice_of(lattice, rank)?;
        let n: usize = lattice.iter().product();
        let mut shape = vec![rank];
        shape.extend_from_slice(&lattice);
        let values = slice(field, rank * n, "field")?.to_vec();
        let phi = DisplacementField::new(Tensor::new(shape, values)?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = folding_percentage(&phi, JacobianMode::Mapping)?;
        Ok(())
    })
}

/// Mean squared local correlation of two single-channel images over
/// `window`-wide windows (0 selects the default of 9).
///
/// # Safety
/// `a` and `b` must hold prod(lattice) values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_local_ncc(
    a: *const f32,
    b: *const f32,
    lattice: *const usize,
    rank: usize,
    window: usize,
    out: *mut f64,
) -> CmStatus {
    guard(|| {
        let lattice = lattice_of(lattice, rank)?;
        let a = image_from(a, &lattice, "a")?;
        let b = image_from(b, &lattice, "b")?;
        let hp = HyperParams::default();
        let w = if window == 0 { hp.window } else { window };
        *out.as_mut().ok_or_else(|| null("out"))? = local_ncc_value(a.tensor(), b.tensor(), w, hp.eps, Normalization::Mean)?;
        Ok(())
    })
}

/// Mean Dice over the nonzero labels present in either map. Writes NaN when
/// neither map has a foreground label.
///
/// # Safety
/// `a` and `b` must hold prod(lattice) values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_dice(a: *const u32, b: *const u32, lattice: *const usize, rank: usize, out: *mut f64) -> CmStatus {
    guard(|| {
        let lattice = lattice_of(lattice, rank)?;
        let n = lattice.iter().product();
        let a = LabelMap::new(&lattice, slice(a, n, "a")?.to_vec())?;
        let b = LabelMap::new(&lattice, slice(b, n, "b")?.to_vec())?;
        *out.as_mut().ok_or_else(|| null("out"))? = dice(&a, &b, None)?.mean.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Mean Euclidean distance between `count` corresponding landmarks stored
/// row-major as `count * rank` coordinates. `spacing` may be null for unit
/// spacing.
///
/// # Safety
/// Point arrays must hold count * rank values, `spacing` rank values if
/// non-null; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cm_tre(
    a: *const f64,
    b: *const f64,
    count: usize,
    rank: usize,
    spacing: *const f64,
    out: *mut f64,
) -> CmStatus {
    guard(|| {
        if !(2..=3).contains(&rank) {
            return Err(bad(format!("rank must be 2 or 3, got {rank}")));
        }
        let points = |p: *const f64, what: &str| -> Result<LandmarkSet, Fail> {
            let flat = slice(p, count * rank, what)?;
            Ok(LandmarkSet::new(rank, flat.chunks(rank).map(<[f64]>::to_vec).collect())?)
        };
        let (a, b) = (points(a, "a")?, points(b, "b")?);
        let unit = vec![1.0; rank];
        let spacing = if spacing.is_null() { &unit[..] } else { slice(spacing, rank, "spacing")? };
        *out.as_mut().ok_or_else(|| null("out"))? = tre(&a, &b, spacing)?;
        Ok(())
    })
}
