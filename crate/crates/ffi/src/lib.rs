//! C ABI over `mxfpq`.
//!
//! Conventions: every fallible function returns an [`MxfpqStatus`]; on
//! failure [`mxfpq_last_error`] gives a message for the calling thread.
//! Matrices are dense row-major `double` buffers. Output buffers come with
//! their length in elements, which must match exactly. Handles are opaque
//! and released with the matching `*_free` function; passing NULL to a free
//! function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mxfpq::hadamard::{apply_ght, HadamardConfig};
use mxfpq::hwemu::{dfq_lut_quantize, emu_gemm, lut_quantize, AddressMode, LutTables};
use mxfpq::quant::{dfq_quantize, quantize, rtn_int_quantize, DfqResult, Granularity, QuantizedTensor};
use mxfpq::{Error, FpFormat};
use ndarray::{Array2, ArrayView1, ArrayView2};

/// Result of every fallible call. Values 2 to 7 match the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MxfpqStatus {
    Ok = 0,
    Config = 2,
    Input = 3,
    Precision = 4,
    Format = 5,
    Overflow = 6,
    Io = 7,
    NullPointer = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MxfpqGranularityKind {
    PerTensor = 0,
    PerChannel = 1,
    PerToken = 2,
    PerGroup = 3,
}

/// Scale granularity. `group_size` and `pad` only matter for `PerGroup`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MxfpqGranularity {
    pub kind: MxfpqGranularityKind,
    pub group_size: usize,
    pub pad: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MxfpqAddressMode {
    Guarded = 0,
    Rounded = 1,
}

/// Codes plus scales of one quantized matrix.
pub struct MxfpqQuantized {
    inner: QuantizedTensor,
}

/// Dual-format quantized activation.
pub struct MxfpqDfq {
    inner: DfqResult,
}

/// Lookup tables of the emulated datapath.
pub struct MxfpqLuts {
    inner: LutTables,
}

enum Fail {
    Core(Error),
    Null(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

type FfiResult<T = ()> = Result<T, Fail>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MxfpqStatus {
    match e {
        Error::Config(_) => MxfpqStatus::Config,
        Error::Input(_) => MxfpqStatus::Input,
        Error::Precision { .. } => MxfpqStatus::Precision,
        Error::Format { .. } => MxfpqStatus::Format,
        Error::Overflow { .. } => MxfpqStatus::Overflow,
        Error::Io(_) => MxfpqStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> FfiResult) -> MxfpqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MxfpqStatus::Ok,
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            MxfpqStatus::NullPointer
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            MxfpqStatus::Panic
        }
    }
}

fn input(msg: String) -> Fail {
    Fail::Core(Error::Input(msg))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn reference<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn matrix<'a>(p: *const f64, rows: usize, cols: usize) -> FfiResult<ArrayView2<'a, f64>> {
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| input(format!("{rows} x {cols} overflows")))?;
    let s = slice(p, n, "matrix data")?;
    Ok(ArrayView2::from_shape((rows, cols), s).expect("length checked"))
}

unsafe fn string<'a>(p: *const c_char, what: &'static str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Core(Error::Config(format!("{what} is not UTF-8"))))
}

unsafe fn format(p: *const c_char) -> FfiResult<FpFormat> {
    Ok(FpFormat::from_name(string(p, "format name")?)?)
}

fn granularity(g: MxfpqGranularity) -> Granularity {
    match g.kind {
        MxfpqGranularityKind::PerTensor => Granularity::PerTensor,
        MxfpqGranularityKind::PerChannel => Granularity::PerChannel,
        MxfpqGranularityKind::PerToken => Granularity::PerToken,
        MxfpqGranularityKind::PerGroup => Granularity::PerGroup {
            size: g.group_size,
            pad: g.pad,
        },
    }
}

fn copy_out<T: Copy>(src: impl ExactSizeIterator<Item = T>, out: &mut [T]) -> FfiResult {
    if src.len() != out.len() {
        return Err(input(format!(
            "output buffer holds {} elements, needs {}",
            out.len(),
            src.len()
        )));
    }
    for (o, v) in out.iter_mut().zip(src) {
        *o = v;
    }
    Ok(())
}

unsafe fn put_handle<T>(out: *mut *mut T, v: T) -> FfiResult {
    if out.is_null() {
        return Err(Fail::Null("output handle"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

unsafe fn free<T>(h: *mut T) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mxfpq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status value.
#[no_mangle]
pub extern "C" fn mxfpq_status_name(status: MxfpqStatus) -> *const c_char {
    let s: &'static CStr = match status {
        MxfpqStatus::Ok => c"ok",
        MxfpqStatus::Config => c"config",
        MxfpqStatus::Input => c"input",
        MxfpqStatus::Precision => c"precision",
        MxfpqStatus::Format => c"format",
        MxfpqStatus::Overflow => c"overflow",
        MxfpqStatus::Io => c"io",
        MxfpqStatus::NullPointer => c"null_pointer",
        MxfpqStatus::Panic => c"panic",
    };
    s.as_ptr()
}

/// Largest finite magnitude of a named format such as "E2M1".
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_format_max(name: *const c_char, out: *mut f64) -> MxfpqStatus {
    guard(|| {
        let v = format(name)?.max_value();
        *out.as_mut().ok_or(Fail::Null("out"))? = v;
        Ok(())
    })
}

/// Rounds `x` to the nearest grid value of a named format (ties to even
/// code, saturating at the largest magnitude).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_format_round(
    name: *const c_char,
    x: f64,
    out: *mut f64,
) -> MxfpqStatus {
    guard(|| {
        let v = format(name)?.round_to_grid(x)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = v;
        Ok(())
    })
}

/// Scaled quantization of a `rows x cols` matrix. `format` is an FP format
/// name or "INT4"/"INT6"/"INT8".
///
/// # Safety
/// `x` must hold `rows * cols` doubles, `format` must be NUL-terminated and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_quantize(
    x: *const f64,
    rows: usize,
    cols: usize,
    format_name: *const c_char,
    gran: MxfpqGranularity,
    out: *mut *mut MxfpqQuantized,
) -> MxfpqStatus {
    guard(|| {
        let x = matrix(x, rows, cols)?;
        let name = string(format_name, "format name")?;
        let int_bits = name
            .to_ascii_uppercase()
            .strip_prefix("INT")
            .and_then(|b| b.parse::<u8>().ok());
        let q = match int_bits {
            Some(bits) => rtn_int_quantize(x, bits, granularity(gran))?,
            None => quantize(x, FpFormat::from_name(name)?, granularity(gran))?,
        };
        put_handle(out, MxfpqQuantized { inner: q })
    })
}

/// E2M1 quantization through the lookup-table quantizer.
///
/// # Safety
/// `luts` must be a live handle, `x` must hold `rows * cols` doubles and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_lut_quantize(
    luts: *const MxfpqLuts,
    x: *const f64,
    rows: usize,
    cols: usize,
    gran: MxfpqGranularity,
    out: *mut *mut MxfpqQuantized,
) -> MxfpqStatus {
    guard(|| {
        let luts = reference(luts, "luts")?;
        let q = lut_quantize(matrix(x, rows, cols)?, granularity(gran), &luts.inner)?;
        put_handle(out, MxfpqQuantized { inner: q })
    })
}

/// Shape of the code matrix.
///
/// # Safety
/// `q` must be a live handle; `rows` and `cols` writable.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_quantized_shape(
    q: *const MxfpqQuantized,
    rows: *mut usize,
    cols: *mut usize,
) -> MxfpqStatus {
    guard(|| {
        let (r, c) = reference(q, "quantized")?.inner.codes.dim();
        *rows.as_mut().ok_or(Fail::Null("rows"))? = r;
        *cols.as_mut().ok_or(Fail::Null("cols"))? = c;
        Ok(())
    })
}

/// Shape of the scale matrix.
///
/// # Safety
/// `q` must be a live handle; `rows` and `cols` writable.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_quantized_scales_shape(
    q: *const MxfpqQuantized,
    rows: *mut usize,
    cols: *mut usize,
) -> MxfpqStatus {
    guard(|| {
        let (r, c) = reference(q, "quantized")?.inner.scales.dim();
        *rows.as_mut().ok_or(Fail::Null("rows"))? = r;
        *cols.as_mut().ok_or(Fail::Null("cols"))? = c;
        Ok(())
    })
}

/// Copies the codes, one per byte, row-major.
///
/// # Safety
/// `q` must be a live handle and `out` hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_quantized_codes(
    q: *const MxfpqQuantized,
    out: *mut u8,
    len: usize,
) -> MxfpqStatus {
    guard(|| {
        let q = reference(q, "quantized")?;
        copy_out(q.inner.codes.iter().copied(), slice_mut(out, len, "out")?)
    })
}

/// Copies the scales, row-major.
///
/// # Safety
/// `q` must be a live handle and `out` hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_quantized_scales(
    q: *const MxfpqQuantized,
    out: *mut f64,
    len: usize,
) -> MxfpqStatus {
    guard(|| {
        let q = reference(q, "quantized")?;
        copy_out(q.inner.scales.iter().copied(), slice_mut(out, len, "out")?)
    })
}

/// Writes the dequantized matrix.
///
/// # Safety
/// `q` must be a live handle and `out` hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_quantized_dequantize(
    q: *const MxfpqQuantized,
    out: *mut f64,
    len: usize,
) -> MxfpqStatus {
    guard(|| {
        let d = reference(q, "quantized")?.inner.dequantize();
        copy_out(d.iter().copied(), slice_mut(out, len, "out")?)
    })
}

/// # Safety
/// `q` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_quantized_free(q: *mut MxfpqQuantized) {
    free(q)
}

/// Dual-format quantization: elements <= 0 use `neg_format`, the rest
/// `pos_format`, each branch with its own scales.
///
/// # Safety
/// `x` must hold `rows * cols` doubles, the names must be NUL-terminated
/// and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_dfq(
    x: *const f64,
    rows: usize,
    cols: usize,
    neg_format: *const c_char,
    pos_format: *const c_char,
    gran: MxfpqGranularity,
    out: *mut *mut MxfpqDfq,
) -> MxfpqStatus {
    guard(|| {
        let d = dfq_quantize(
            matrix(x, rows, cols)?,
            format(neg_format)?,
            format(pos_format)?,
            granularity(gran),
        )?;
        put_handle(out, MxfpqDfq { inner: d })
    })
}

/// E1M2 / E2M1 dual-format quantization through the lookup tables.
///
/// # Safety
/// `luts` must be a live handle, `x` must hold `rows * cols` doubles and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_dfq_lut_quantize(
    luts: *const MxfpqLuts,
    x: *const f64,
    rows: usize,
    cols: usize,
    gran: MxfpqGranularity,
    out: *mut *mut MxfpqDfq,
) -> MxfpqStatus {
    guard(|| {
        let luts = reference(luts, "luts")?;
        let d = dfq_lut_quantize(matrix(x, rows, cols)?, granularity(gran), &luts.inner)?;
        put_handle(out, MxfpqDfq { inner: d })
    })
}

/// Copies the combined code plane (sign bit selects the branch).
///
/// # Safety
/// `d` must be a live handle and `out` hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_dfq_codes(d: *const MxfpqDfq, out: *mut u8, len: usize) -> MxfpqStatus {
    guard(|| {
        let c = reference(d, "dfq")?.inner.combined_codes();
        copy_out(c.iter().copied(), slice_mut(out, len, "out")?)
    })
}

/// Writes the dequantized matrix.
///
/// # Safety
/// `d` must be a live handle and `out` hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_dfq_dequantize(
    d: *const MxfpqDfq,
    out: *mut f64,
    len: usize,
) -> MxfpqStatus {
    guard(|| {
        let v = reference(d, "dfq")?.inner.dequantize();
        copy_out(v.iter().copied(), slice_mut(out, len, "out")?)
    })
}

/// # Safety
/// `d` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_dfq_free(d: *mut MxfpqDfq) {
    free(d)
}

/// Normalized group-wise Hadamard transform of every row, in place.
///
/// # Safety
/// `data` must hold `rows * cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_ght_inplace(
    data: *mut f64,
    rows: usize,
    cols: usize,
    group_size: usize,
) -> MxfpqStatus {
    guard(|| {
        let cfg = HadamardConfig::new(cols, group_size)?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| input(format!("{rows} x {cols} overflows")))?;
        let buf = slice_mut(data, n, "data")?;
        let y = apply_ght(ArrayView2::from_shape((rows, cols), &*buf).expect("length checked"), &cfg)?;
        copy_out(y.iter().copied(), buf)
    })
}

/// Weight-side fusion in place: `W <- ght(W / lambda)` with `lambda`
/// dividing the columns. A NULL `lambda` means all ones.
///
/// # Safety
/// `w` must hold `rows * cols` doubles and `lambda`, if not NULL, `cols`.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_fuse_weight_inplace(
    w: *mut f64,
    rows: usize,
    cols: usize,
    lambda: *const f64,
    group_size: usize,
) -> MxfpqStatus {
    guard(|| {
        let cfg = HadamardConfig::new(cols, group_size)?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| input(format!("{rows} x {cols} overflows")))?;
        let buf = slice_mut(w, n, "w")?;
        let view = ArrayView2::from_shape((rows, cols), &*buf).expect("length checked");
        let y: Array2<f64> = if lambda.is_null() {
            apply_ght(view, &cfg)?
        } else {
            let l = ArrayView1::from(slice(lambda, cols, "lambda")?);
            mxfpq::galt::fuse_lambda_weight(view, l, &cfg)?
        };
        copy_out(y.iter().copied(), buf)
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_luts_new(mode: MxfpqAddressMode, out: *mut *mut MxfpqLuts) -> MxfpqStatus {
    guard(|| {
        let mode = match mode {
            MxfpqAddressMode::Guarded => AddressMode::Guarded,
            MxfpqAddressMode::Rounded => AddressMode::Rounded,
        };
        put_handle(out, MxfpqLuts { inner: LutTables::new(mode) })
    })
}

/// # Safety
/// `luts` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_luts_free(luts: *mut MxfpqLuts) {
    free(luts)
}

/// `X W^T` on the emulated datapath. `x` is `[T, C]`, `w` is `[O, C]`,
/// `out` receives `[T, O]`.
///
/// # Safety
/// All handles must be live and `out` hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_emu_gemm(
    luts: *const MxfpqLuts,
    x: *const MxfpqQuantized,
    w: *const MxfpqQuantized,
    out: *mut f64,
    len: usize,
) -> MxfpqStatus {
    guard(|| {
        let luts = reference(luts, "luts")?;
        let y = emu_gemm(&reference(x, "x")?.inner, &reference(w, "w")?.inner, &luts.inner)?;
        copy_out(y.iter().copied(), slice_mut(out, len, "out")?)
    })
}

/// Same as [`mxfpq_emu_gemm`] with a dual-format activation.
///
/// # Safety
/// All handles must be live and `out` hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mxfpq_emu_gemm_dfq(
    luts: *const MxfpqLuts,
    x: *const MxfpqDfq,
    w: *const MxfpqQuantized,
    out: *mut f64,
    len: usize,
) -> MxfpqStatus {
    guard(|| {
        let luts = reference(luts, "luts")?;
        let y = emu_gemm(&reference(x, "x")?.inner, &reference(w, "w")?.inner, &luts.inner)?;
        copy_out(y.iter().copied(), slice_mut(out, len, "out")?)
    })
}
