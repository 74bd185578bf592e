//! C interface to the `particul` library.
//!
//! Models, calibrated detector banks and feature archives are opaque handles
//! created by `*_load` and released by the matching `*_free`. Every fallible
//! call returns a [`ParticulStatus`]; on failure the message is available from
//! [`particul_last_error`] on the same thread until the next failing call.
//! Arrays are passed as pointer plus length and are never retained.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use particul::baselines::{energy_confidence, mcp_confidence};
use particul::calibration::{class_confidence, vanilla_confidence, LogisticCalibration};
use particul::classifier::ToyCnn;
use particul::detectors::{BankMode, DetectorBank};
use particul::farc::FarcArchive;
use particul::metrics::{aupr, auroc, fpr_at_tpr, spearman, ScorePair};
use particul::tensor::{FeatureMap, Image};
use particul::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParticulStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Format = 4,
    Io = 5,
    Calibration = 6,
    /// Caller buffer too short; the last-error message names the needed length.
    BufferTooSmall = 7,
    Panic = 8,
}

/// Classifier checkpoint.
pub struct ParticulModel(ToyCnn);

/// Detector bank with its calibration.
pub struct ParticulBank {
    bank: DetectorBank,
    cal: LogisticCalibration,
}

/// Parsed feature archive.
pub struct ParticulArchive(FarcArchive);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(ParticulStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Dimension(_) | Error::Selector(_) | Error::Mode(_) => ParticulStatus::Dimension,
            Error::Format { .. } => ParticulStatus::Format,
            Error::Io(_) | Error::Artifact(_) => ParticulStatus::Io,
            Error::Calibration(_) | Error::DegenerateCalibration { .. } => {
                ParticulStatus::Calibration
            }
            _ => ParticulStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn fail(status: ParticulStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

/// Runs `f`, turning errors and panics into a status plus last-error message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ParticulStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ParticulStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ParticulStatus::Panic
        }
    }
}

fn nonnull<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    // SAFETY: caller passes either null or a valid pointer obtained from this library.
    unsafe { p.as_ref() }
        .ok_or_else(|| fail(ParticulStatus::NullPointer, format!("{what} is null")))
}

fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(ParticulStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: caller guarantees `len` readable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(ParticulStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: caller guarantees `len` writable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(fail(ParticulStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: non-null, caller guarantees it is writable.
    unsafe { out.write(value) };
    Ok(())
}

fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(fail(ParticulStatus::NullPointer, "path is null"));
    }
    // SAFETY: non-null, caller passes a nul-terminated string.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| fail(ParticulStatus::InvalidArgument, "path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn copy_into<T: Copy>(src: &[T], dst: *mut T, dst_len: usize, what: &str) -> Result<(), Fail> {
    if dst_len < src.len() {
        return Err(fail(
            ParticulStatus::BufferTooSmall,
            format!("{what} needs {} elements, got {dst_len}", src.len()),
        ));
    }
    slice_mut(dst, src.len(), what)?.copy_from_slice(src);
    Ok(())
}

fn feature_map(
    data: *const f64,
    height: usize,
    width: usize,
    depth: usize,
) -> Result<FeatureMap, Fail> {
    let len = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(depth))
        .ok_or_else(|| fail(ParticulStatus::Dimension, "feature map size overflows"))?;
    Ok(FeatureMap::new(
        height,
        width,
        depth,
        slice(data, len, "features")?.to_vec(),
    )?)
}

fn box_out<T>(value: T, out: *mut *mut T) -> Result<(), Fail> {
    write_out(out, Box::into_raw(Box::new(value)), "out")
}

/// Message of the last failing call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn particul_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn particul_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a classifier checkpoint.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn particul_model_load(
    path: *const c_char,
    out: *mut *mut ParticulModel,
) -> ParticulStatus {
    guard(|| {
        let model = ToyCnn::load(&path_arg(path)?)?;
        box_out(ParticulModel(model), out)
    })
}

/// # Safety
/// `model` must come from `particul_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn particul_model_free(model: *mut ParticulModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input `(H, W, C)`, feature map `(H', W', D)` and logit count `N`.
///
/// # Safety
/// All pointers must be valid; `dims` must hold 7 elements.
#[no_mangle]
pub unsafe extern "C" fn particul_model_dims(
    model: *const ParticulModel,
    dims: *mut usize,
) -> ParticulStatus {
    guard(|| {
        let m = &nonnull(model, "model")?.0;
        let (h, w) = m.fmap_size();
        let all = [
            m.input_height,
            m.input_width,
            m.input_channels,
            h,
            w,
            m.depth(),
            m.num_classes(),
        ];
        copy_into(&all, dims, 7, "dims")
    })
}

/// Runs the classifier on an `H×W×C` image in `[0, 1]`, row-major with
/// channels last. Writes the feature map and the logits.
///
/// # Safety
/// All pointers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn particul_model_forward(
    model: *const ParticulModel,
    pixels: *const f64,
    pixels_len: usize,
    features_out: *mut f64,
    features_len: usize,
    logits_out: *mut f64,
    logits_len: usize,
) -> ParticulStatus {
    guard(|| {
        let m = &nonnull(model, "model")?.0;
        let px = slice(pixels, pixels_len, "pixels")?;
        let image = Image::new(m.input_height, m.input_width, m.input_channels, px.to_vec())?;
        let (f, l) = m.forward(&image)?;
        copy_into(f.data(), features_out, features_len, "features")?;
        copy_into(&l, logits_out, logits_len, "logits")
    })
}

/// Loads a detector bank and its calibration.
///
/// # Safety
/// Paths must be nul-terminated strings and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn particul_bank_load(
    bank_path: *const c_char,
    calibration_path: *const c_char,
    out: *mut *mut ParticulBank,
) -> ParticulStatus {
    guard(|| {
        let bank = DetectorBank::load(&path_arg(bank_path)?)?;
        let cal = LogisticCalibration::load(&path_arg(calibration_path)?)?;
        if (cal.num_classes(), cal.per_class()) != (bank.num_classes(), bank.per_class()) {
            return Err(fail(
                ParticulStatus::Dimension,
                "calibration does not match the bank",
            ));
        }
        box_out(ParticulBank { bank, cal }, out)
    })
}

/// # Safety
/// `bank` must come from `particul_bank_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn particul_bank_free(bank: *mut ParticulBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// `(class-based ? 1 : 0, N, p, D)`.
///
/// # Safety
/// All pointers must be valid; `info` must hold 4 elements.
#[no_mangle]
pub unsafe extern "C" fn particul_bank_info(
    bank: *const ParticulBank,
    info: *mut usize,
) -> ParticulStatus {
    guard(|| {
        let b = &nonnull(bank, "bank")?.bank;
        let all = [
            usize::from(b.mode() == BankMode::ClassBased),
            b.num_classes(),
            b.per_class(),
            b.depth(),
        ];
        copy_into(&all, info, 4, "info")
    })
}

/// Vanilla confidence of an `H×W×D` feature map.
///
/// # Safety
/// `features` must hold `H·W·D` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn particul_vanilla_confidence(
    bank: *const ParticulBank,
    features: *const f64,
    height: usize,
    width: usize,
    depth: usize,
    out: *mut f64,
) -> ParticulStatus {
    guard(|| {
        let b = nonnull(bank, "bank")?;
        let f = feature_map(features, height, width, depth)?;
        write_out(out, vanilla_confidence(&f, &b.bank, &b.cal)?.value(), "out")
    })
}

/// Class-based confidence, using the detectors of the arg-max logit.
///
/// # Safety
/// `features` must hold `H·W·D` values, `logits` `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn particul_class_confidence(
    bank: *const ParticulBank,
    features: *const f64,
    height: usize,
    width: usize,
    depth: usize,
    logits: *const f64,
    n: usize,
    out: *mut f64,
) -> ParticulStatus {
    guard(|| {
        let b = nonnull(bank, "bank")?;
        let f = feature_map(features, height, width, depth)?;
        let l = slice(logits, n, "logits")?;
        write_out(
            out,
            class_confidence(&f, l, &b.bank, &b.cal)?.value(),
            "out",
        )
    })
}

/// Maximum softmax probability.
///
/// # Safety
/// `logits` must hold `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn particul_mcp_confidence(
    logits: *const f64,
    n: usize,
    out: *mut f64,
) -> ParticulStatus {
    guard(|| {
        write_out(
            out,
            mcp_confidence(slice(logits, n, "logits")?)?.value(),
            "out",
        )
    })
}

/// Log-sum-exp of the logits.
///
/// # Safety
/// `logits` must hold `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn particul_energy_confidence(
    logits: *const f64,
    n: usize,
    out: *mut f64,
) -> ParticulStatus {
    guard(|| write_out(out, energy_confidence(slice(logits, n, "logits")?)?, "out"))
}

fn pair(iod: *const f64, n_iod: usize, ood: *const f64, n_ood: usize) -> Result<ScorePair, Fail> {
    Ok(ScorePair::new(
        slice(iod, n_iod, "iod scores")?.to_vec(),
        slice(ood, n_ood, "ood scores")?.to_vec(),
    )?)
}

/// Area under the ROC curve, in-distribution as positives.
///
/// # Safety
/// Score arrays must hold their stated lengths; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn particul_auroc(
    iod: *const f64,
    n_iod: usize,
    ood: *const f64,
    n_ood: usize,
    out: *mut f64,
) -> ParticulStatus {
    guard(|| write_out(out, auroc(&pair(iod, n_iod, ood, n_ood)?)?, "out"))
}

/// Step-wise area under the precision-recall curve.
///
/// # Safety
/// Score arrays must hold their stated lengths; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn particul_aupr(
    iod: *const f64,
    n_iod: usize,
    ood: *const f64,
    n_ood: usize,
    out: *mut f64,
) -> ParticulStatus {
    guard(|| write_out(out, aupr(&pair(iod, n_iod, ood, n_ood)?)?, "out"))
}

/// False-positive rate at the first threshold reaching `target_tpr`.
///
/// # Safety
/// Score arrays must hold their stated lengths; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn particul_fpr_at_tpr(
    iod: *const f64,
    n_iod: usize,
    ood: *const f64,
    n_ood: usize,
    target_tpr: f64,
    out: *mut f64,
) -> ParticulStatus {
    guard(|| {
        write_out(
            out,
            fpr_at_tpr(&pair(iod, n_iod, ood, n_ood)?, target_tpr)?,
            "out",
        )
    })
}

/// Spearman rank correlation. Degenerate input (constant series, fewer than
/// three points) is `PARTICUL_STATUS_INVALID_ARGUMENT`.
///
/// # Safety
/// `xs` and `ys` must hold `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn particul_spearman(
    xs: *const f64,
    ys: *const f64,
    n: usize,
    out: *mut f64,
) -> ParticulStatus {
    guard(|| {
        write_out(
            out,
            spearman(slice(xs, n, "xs")?, slice(ys, n, "ys")?)?,
            "out",
        )
    })
}

/// Loads and validates a feature archive.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn particul_archive_load(
    path: *const c_char,
    out: *mut *mut ParticulArchive,
) -> ParticulStatus {
    guard(|| {
        let a = FarcArchive::load(&path_arg(path)?)?;
        box_out(ParticulArchive(a), out)
    })
}

/// Parses an archive from memory.
///
/// # Safety
/// `bytes` must hold `len` bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn particul_archive_parse(
    bytes: *const u8,
    len: usize,
    out: *mut *mut ParticulArchive,
) -> ParticulStatus {
    guard(|| {
        let a = FarcArchive::from_bytes(slice(bytes, len, "bytes")?)?;
        box_out(ParticulArchive(a), out)
    })
}

/// # Safety
/// `archive` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn particul_archive_free(archive: *mut ParticulArchive) {
    if !archive.is_null() {
        drop(Box::from_raw(archive));
    }
}

/// Record count and logits per record.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn particul_archive_info(
    archive: *const ParticulArchive,
    records: *mut usize,
    logits: *mut usize,
) -> ParticulStatus {
    guard(|| {
        let a = &nonnull(archive, "archive")?.0;
        write_out(records, a.len(), "records")?;
        write_out(logits, a.num_logits, "logits")
    })
}

fn record<'a>(
    archive: *const ParticulArchive,
    index: usize,
) -> Result<&'a particul::farc::FarcRecord, Fail> {
    let a: &'a ParticulArchive = nonnull(archive, "archive")?;
    a.0.records.get(index).ok_or_else(|| {
        fail(
            ParticulStatus::InvalidArgument,
            format!("record {index} out of range ({} records)", a.0.len()),
        )
    })
}

/// `(label, H, W, D)` of one record.
///
/// # Safety
/// All pointers must be valid; `dims` must hold 4 elements.
#[no_mangle]
pub unsafe extern "C" fn particul_archive_record_dims(
    archive: *const ParticulArchive,
    index: usize,
    dims: *mut usize,
) -> ParticulStatus {
    guard(|| {
        let r = record(archive, index)?;
        copy_into(
            &[r.label as usize, r.height, r.width, r.depth],
            dims,
            4,
            "dims",
        )
    })
}

/// Copies the `H·W·D` feature values of one record.
///
/// # Safety
/// `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn particul_archive_record_features(
    archive: *const ParticulArchive,
    index: usize,
    out: *mut f32,
    len: usize,
) -> ParticulStatus {
    guard(|| copy_into(&record(archive, index)?.features, out, len, "features"))
}

/// Copies the logits of one record.
///
/// # Safety
/// `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn particul_archive_record_logits(
    archive: *const ParticulArchive,
    index: usize,
    out: *mut f32,
    len: usize,
) -> ParticulStatus {
    guard(|| copy_into(&record(archive, index)?.logits, out, len, "logits"))
}
