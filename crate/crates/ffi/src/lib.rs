//! C ABI over the strategy format, the cost model and the quantizers.
//!
//! Every fallible function returns an [`SdqStatus`] and writes its result
//! through an out-pointer. On failure the message is kept per thread and can
//! be read with [`sdq_last_error_message`]. Handles are opaque; each `*_parse`
//! or `*_load` result must be released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sdq_core::cost::{self, LayerMeta};
use sdq_core::quant::{expected_error_coeff, quantize_weight_values, UnitQuantizer};
use sdq_core::strategy::MpqStrategy;
use sdq_core::{SdqError, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Contract = 3,
    Parse = 4,
    Io = 5,
    Config = 6,
    Numerical = 7,
    Panic = 8,
}

/// A parsed mixed-precision strategy.
pub struct SdqStrategy {
    inner: MpqStrategy,
}

/// A per-layer cost table.
pub struct SdqLayerTable {
    inner: Vec<LayerMeta>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &SdqError) -> SdqStatus {
    match e {
        SdqError::Contract(_) => SdqStatus::Contract,
        SdqError::Parse { .. } => SdqStatus::Parse,
        SdqError::Io { .. } => SdqStatus::Io,
        SdqError::Config(_) => SdqStatus::Config,
        SdqError::NonFinite { .. } | SdqError::NumericalAbort { .. } => SdqStatus::Numerical,
    }
}

struct Fail(SdqStatus, String);

impl From<SdqError> for Fail {
    fn from(e: SdqError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SdqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SdqStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside the sdq library".into());
            SdqStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(SdqStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    non_null(p, what)?;
    // SAFETY: caller passes a nul-terminated string that outlives the call.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(SdqStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn put<T>(out: *mut T, v: T) {
    // SAFETY: checked non-null by the caller, points to writable storage.
    unsafe { out.write(v) }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sdq_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed, or be null.
#[no_mangle]
pub unsafe extern "C" fn sdq_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: allocated by CString::into_raw in this library.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Parses strategy text.
///
/// # Safety
/// `text` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdq_strategy_parse(text: *const c_char, out: *mut *mut SdqStrategy) -> SdqStatus {
    guard(|| {
        non_null(out, "out")?;
        let text = unsafe { read_str(text, "text") }?;
        let inner = MpqStrategy::parse(text, "<ffi>")?;
        unsafe { put(out, Box::into_raw(Box::new(SdqStrategy { inner }))) };
        Ok(())
    })
}

/// Loads a strategy file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdq_strategy_load(path: *const c_char, out: *mut *mut SdqStrategy) -> SdqStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = unsafe { read_str(path, "path") }?;
        let inner = MpqStrategy::load(Path::new(path))?;
        unsafe { put(out, Box::into_raw(Box::new(SdqStrategy { inner }))) };
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not have been freed, or be null.
#[no_mangle]
pub unsafe extern "C" fn sdq_strategy_free(s: *mut SdqStrategy) {
    if !s.is_null() {
        // SAFETY: allocated by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(s) });
    }
}

unsafe fn strategy<'a>(s: *const SdqStrategy) -> Result<&'a MpqStrategy, Fail> {
    non_null(s, "strategy")?;
    // SAFETY: a live handle from this library.
    Ok(unsafe { &(*s).inner })
}

unsafe fn table<'a>(t: *const SdqLayerTable) -> Result<&'a [LayerMeta], Fail> {
    non_null(t, "layer table")?;
    // SAFETY: a live handle from this library.
    Ok(unsafe { &(*t).inner })
}

/// Serializes a strategy; free the result with [`sdq_string_free`].
///
/// # Safety
/// `s` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdq_strategy_to_text(s: *const SdqStrategy, out: *mut *mut c_char) -> SdqStatus {
    guard(|| {
        non_null(out, "out")?;
        let text = unsafe { strategy(s) }?.to_text();
        let c = CString::new(text).map_err(|_| Fail(SdqStatus::Contract, "nul byte in strategy text".into()))?;
        unsafe { put(out, c.into_raw()) };
        Ok(())
    })
}

/// # Safety
/// `s` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdq_strategy_layer_count(s: *const SdqStrategy, out: *mut usize) -> SdqStatus {
    guard(|| {
        non_null(out, "out")?;
        let n = unsafe { strategy(s) }?.layers.len();
        unsafe { put(out, n) };
        Ok(())
    })
}

/// Bitwidth of layer `index`.
///
/// # Safety
/// `s` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdq_strategy_layer_bits(s: *const SdqStrategy, index: usize, out: *mut u32) -> SdqStatus {
    guard(|| {
        non_null(out, "out")?;
        let st = unsafe { strategy(s) }?;
        let l = st.layers.get(index).ok_or_else(|| {
            Fail(
                SdqStatus::Contract,
                format!("layer index {index} out of range ({} layers)", st.layers.len()),
            )
        })?;
        unsafe { put(out, l.bits) };
        Ok(())
    })
}

/// Parameter-weighted average weight bitwidth.
///
/// # Safety
/// `s` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdq_strategy_avg_bits(s: *const SdqStrategy, out: *mut f64) -> SdqStatus {
    guard(|| {
        non_null(out, "out")?;
        let v = unsafe { strategy(s) }?.avg_weight_bits();
        unsafe { put(out, v) };
        Ok(())
    })
}

/// Weight compression rate against 32-bit floats.
///
/// # Safety
/// `s` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdq_strategy_wcr(s: *const SdqStrategy, out: *mut f64) -> SdqStatus {
    guard(|| {
        non_null(out, "out")?;
        let v = cost::wcr(unsafe { strategy(s) }?);
        unsafe { put(out, v) };
        Ok(())
    })
}

/// Rounds every layer up to the nearest of `supported[0..n]`; the result
/// is a new handle.
///
/// # Safety
/// `s` must be a live handle, `supported` must point to `n` values, `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdq_strategy_hw_round(
    s: *const SdqStrategy,
    supported: *const u32,
    n: usize,
    out: *mut *mut SdqStrategy,
) -> SdqStatus {
    guard(|| {
        non_null(out, "out")?;
        non_null(supported, "supported")?;
        let st = unsafe { strategy(s) }?;
        // SAFETY: caller guarantees `n` readable values.
        let sup = unsafe { std::slice::from_raw_parts(supported, n) };
        let r = cost::hw_round(st, sup)?;
        unsafe { put(out, Box::into_raw(Box::new(SdqStrategy { inner: r.strategy }))) };
        Ok(())
    })
}

/// Parses a layer table (`name kind params in_w in_h stride` rows).
///
/// # Safety
/// `text` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdq_layer_table_parse(text: *const c_char, out: *mut *mut SdqLayerTable) -> SdqStatus {
    guard(|| {
        non_null(out, "out")?;
        let text = unsafe { read_str(text, "text") }?;
        let inner = cost::parse_layer_table(text, "<ffi>")?;
        unsafe { put(out, Box::into_raw(Box::new(SdqLayerTable { inner }))) };
        Ok(())
    })
}

/// The built-in ResNet18 layer table.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdq_layer_table_resnet18(out: *mut *mut SdqLayerTable) -> SdqStatus {
    guard(|| {
        non_null(out, "out")?;
        let inner = cost::resnet18_layer_table();
        unsafe { put(out, Box::into_raw(Box::new(SdqLayerTable { inner }))) };
        Ok(())
    })
}

/// # Safety
/// `t` must come from this library and not have been freed, or be null.
#[no_mangle]
pub unsafe extern "C" fn sdq_layer_table_free(t: *mut SdqLayerTable) {
    if !t.is_null() {
        // SAFETY: allocated by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(t) });
    }
}

/// # Safety
/// `t` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdq_layer_table_len(t: *const SdqLayerTable, out: *mut usize) -> SdqStatus {
    guard(|| {
        non_null(out, "out")?;
        let n = unsafe { table(t) }?.len();
        unsafe { put(out, n) };
        Ok(())
    })
}

/// Total BitOPs of `s` over the layers of `t`.
///
/// # Safety
/// `s` and `t` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdq_bitops_total(s: *const SdqStrategy, t: *const SdqLayerTable, out: *mut f64) -> SdqStatus {
    guard(|| {
        non_null(out, "out")?;
        let v = cost::total_bitops(unsafe { strategy(s) }?, unsafe { table(t) }?)?;
        unsafe { put(out, v) };
        Ok(())
    })
}

/// Model size in bytes.
///
/// # Safety
/// `s` and `t` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdq_model_size_bytes(
    s: *const SdqStrategy,
    t: *const SdqLayerTable,
    out: *mut f64,
) -> SdqStatus {
    guard(|| {
        non_null(out, "out")?;
        let v = cost::model_size_bytes(unsafe { strategy(s) }?, unsafe { table(t) }?)?;
        unsafe { put(out, v) };
        Ok(())
    })
}

/// Rounds `x` onto the `bits`-bit grid of `[0, 1]`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdq_quantize_unit(x: f64, bits: u32, out: *mut f64) -> SdqStatus {
    guard(|| {
        non_null(out, "out")?;
        let v = UnitQuantizer::new(bits)?.apply(x);
        unsafe { put(out, v) };
        Ok(())
    })
}

/// Quantizes the weight tensor `w[0..n]` at `bits` into `out[0..n]`.
///
/// # Safety
/// `w` must point to `n` readable values and `out` to `n` writable ones.
#[no_mangle]
pub unsafe extern "C" fn sdq_quantize_weights(w: *const f64, n: usize, bits: u32, out: *mut f64) -> SdqStatus {
    guard(|| {
        non_null(w, "w")?;
        non_null(out, "out")?;
        // SAFETY: caller guarantees `n` readable values.
        let data = unsafe { std::slice::from_raw_parts(w, n) }.to_vec();
        let t = Tensor::new(data, vec![1, n])?;
        let (q, _) = quantize_weight_values(&t, &[bits])?;
        // SAFETY: caller guarantees `n` writable values.
        unsafe { std::slice::from_raw_parts_mut(out, n) }.copy_from_slice(q.data());
        Ok(())
    })
}

/// Expected squared error of a `bits`-bit uniform quantizer in units of the
/// squared range; 0 for an unsupported bitwidth.
#[no_mangle]
pub extern "C" fn sdq_expected_error_coeff(bits: u32) -> f64 {
    if UnitQuantizer::new(bits).is_err() {
        return 0.0;
    }
    expected_error_coeff(bits)
}
