//! C ABI over the antidote engine: opaque handles, status codes, and a
//! thread-local last-error message. The header is generated into
//! `include/antidote.h` by the build script.
//!
//! Pointer contracts live in each function's doc comment (they end up in
//! the generated header), not in separate safety sections.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use antidote::attention::{
    apply_mask, channel_attention, make_mask, spatial_attention, MaskCriterion, PruneMask,
};
use antidote::error::Error;
use antidote::flops::{dynamic_flops, model_dense_flops, PruneRatios};
use antidote::model::{builtin_spec, ModelSpec};
use antidote::tensor::Tensor4;

/// Status code returned by every fallible call. Anything other than Ok
/// leaves a message retrievable via `antidote_last_error`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AntidoteStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidShape = 3,
    InvalidRatio = 4,
    OutOfRange = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

pub struct AntidoteTensor(Tensor4);
pub struct AntidoteMask(PruneMask);
pub struct AntidoteModelSpec(ModelSpec);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&ch| ch != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(cleaned).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> AntidoteStatus {
    set_error(&err.to_string());
    match err {
        Error::InvalidShape { .. } => AntidoteStatus::InvalidShape,
        Error::InvalidRatio { .. } => AntidoteStatus::InvalidRatio,
        Error::SampleOutOfRange { .. } => AntidoteStatus::OutOfRange,
        Error::Config { .. } | Error::BlockMismatch { .. } => AntidoteStatus::InvalidArgument,
        _ => AntidoteStatus::Internal,
    }
}

fn invalid(msg: &str) -> AntidoteStatus {
    set_error(msg);
    AntidoteStatus::InvalidArgument
}

fn null_ptr(what: &str) -> AntidoteStatus {
    set_error(&format!("{what} is null"));
    AntidoteStatus::NullPointer
}

fn guard(body: impl FnOnce() -> AntidoteStatus) -> AntidoteStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            AntidoteStatus::Internal
        }
    }
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn antidote_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Free a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn antidote_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Tensors
// ---------------------------------------------------------------------------

/// Create an (n, c, h, w) tensor. `data` may be null for a zero fill;
/// otherwise `len` must equal n*c*h*w.
#[no_mangle]
pub unsafe extern "C" fn antidote_tensor_create(
    n: u32,
    c: u32,
    h: u32,
    w: u32,
    data: *const f32,
    len: usize,
    out: *mut *mut AntidoteTensor,
) -> AntidoteStatus {
    guard(|| {
        if out.is_null() {
            return null_ptr("out");
        }
        let dims = (n as usize, c as usize, h as usize, w as usize);
        let result = if data.is_null() {
            Tensor4::zeros(dims)
        } else {
            let slice = std::slice::from_raw_parts(data, len);
            Tensor4::from_vec(dims, slice.to_vec())
        };
        match result {
            Ok(t) => {
                *out = Box::into_raw(Box::new(AntidoteTensor(t)));
                AntidoteStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn antidote_tensor_free(t: *mut AntidoteTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Write the four dims into `out_dims` (length 4).
#[no_mangle]
pub unsafe extern "C" fn antidote_tensor_dims(
    t: *const AntidoteTensor,
    out_dims: *mut u32,
) -> AntidoteStatus {
    guard(|| {
        if t.is_null() {
            return null_ptr("tensor");
        }
        if out_dims.is_null() {
            return null_ptr("out_dims");
        }
        let (n, c, h, w) = (*t).0.dims();
        let out = std::slice::from_raw_parts_mut(out_dims, 4);
        out[0] = n as u32;
        out[1] = c as u32;
        out[2] = h as u32;
        out[3] = w as u32;
        AntidoteStatus::Ok
    })
}

/// Copy the flat NCHW data into `out` (length `len` >= element count).
#[no_mangle]
pub unsafe extern "C" fn antidote_tensor_data(
    t: *const AntidoteTensor,
    out: *mut f32,
    len: usize,
) -> AntidoteStatus {
    guard(|| {
        if t.is_null() {
            return null_ptr("tensor");
        }
        if out.is_null() {
            return null_ptr("out");
        }
        let data = (*t).0.data();
        if len < data.len() {
            set_error(&format!("need {} elements, got {len}", data.len()));
            return AntidoteStatus::BufferTooSmall;
        }
        std::slice::from_raw_parts_mut(out, data.len()).copy_from_slice(data);
        AntidoteStatus::Ok
    })
}

// ---------------------------------------------------------------------------
// Attention and masks
// ---------------------------------------------------------------------------

/// Per-channel spatial means of one sample; `out` must hold c values.
#[no_mangle]
pub unsafe extern "C" fn antidote_channel_attention(
    t: *const AntidoteTensor,
    sample: usize,
    out: *mut f32,
    len: usize,
) -> AntidoteStatus {
    guard(|| {
        if t.is_null() {
            return null_ptr("tensor");
        }
        if out.is_null() {
            return null_ptr("out");
        }
        match channel_attention(&(*t).0, sample) {
            Ok(att) => {
                if len < att.len() {
                    set_error(&format!("need {} elements, got {len}", att.len()));
                    return AntidoteStatus::BufferTooSmall;
                }
                std::slice::from_raw_parts_mut(out, att.len()).copy_from_slice(&att);
                AntidoteStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Per-location channel means of one sample; `out` must hold h*w values.
#[no_mangle]
pub unsafe extern "C" fn antidote_spatial_attention(
    t: *const AntidoteTensor,
    sample: usize,
    out: *mut f32,
    len: usize,
) -> AntidoteStatus {
    guard(|| {
        if t.is_null() {
            return null_ptr("tensor");
        }
        if out.is_null() {
            return null_ptr("out");
        }
        match spatial_attention(&(*t).0, sample) {
            Ok(att) => {
                if len < att.len() {
                    set_error(&format!("need {} elements, got {len}", att.len()));
                    return AntidoteStatus::BufferTooSmall;
                }
                std::slice::from_raw_parts_mut(out, att.len()).copy_from_slice(&att);
                AntidoteStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Mask criterion selector: 0 attention, 1 random (seeded), 2 inverse.
fn criterion_from(criterion: i32, seed: u64) -> Option<MaskCriterion> {
    match criterion {
        0 => Some(MaskCriterion::Attention),
        1 => Some(MaskCriterion::Random(seed)),
        2 => Some(MaskCriterion::InverseAttention),
        _ => None,
    }
}

/// Build a top-k keep mask for one sample of a feature map. Keep ratios lie
/// in (0, 1]; k = trunc(ratio * count) clamped to at least 1.
#[no_mangle]
pub unsafe extern "C" fn antidote_mask_create(
    t: *const AntidoteTensor,
    sample: usize,
    keep_channel: f64,
    keep_spatial: f64,
    criterion: i32,
    seed: u64,
    out: *mut *mut AntidoteMask,
) -> AntidoteStatus {
    guard(|| {
        if t.is_null() {
            return null_ptr("tensor");
        }
        if out.is_null() {
            return null_ptr("out");
        }
        let Some(criterion) = criterion_from(criterion, seed) else {
            return invalid("criterion must be 0 (attention), 1 (random) or 2 (inverse)");
        };
        match make_mask(&(*t).0, sample, keep_channel, keep_spatial, criterion) {
            Ok(mask) => {
                *out = Box::into_raw(Box::new(AntidoteMask(mask)));
                AntidoteStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn antidote_mask_free(mask: *mut AntidoteMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Number of kept channels and kept spatial columns.
#[no_mangle]
pub unsafe extern "C" fn antidote_mask_kept(
    mask: *const AntidoteMask,
    kept_channels: *mut usize,
    kept_columns: *mut usize,
) -> AntidoteStatus {
    guard(|| {
        if mask.is_null() {
            return null_ptr("mask");
        }
        if !kept_channels.is_null() {
            *kept_channels = (*mask).0.k_channel;
        }
        if !kept_columns.is_null() {
            *kept_columns = (*mask).0.k_spatial;
        }
        AntidoteStatus::Ok
    })
}

/// Channel keep bits as 0/1 bytes; `out` must hold c values.
#[no_mangle]
pub unsafe extern "C" fn antidote_mask_channel_bits(
    mask: *const AntidoteMask,
    out: *mut u8,
    len: usize,
) -> AntidoteStatus {
    guard(|| {
        if mask.is_null() {
            return null_ptr("mask");
        }
        if out.is_null() {
            return null_ptr("out");
        }
        let bits = (*mask).0.channel_bits();
        if len < bits.len() {
            set_error(&format!("need {} elements, got {len}", bits.len()));
            return AntidoteStatus::BufferTooSmall;
        }
        for (dst, &b) in std::slice::from_raw_parts_mut(out, bits.len()).iter_mut().zip(bits) {
            *dst = b as u8;
        }
        AntidoteStatus::Ok
    })
}

/// Spatial keep bits in row-major order; `out` must hold h*w values.
#[no_mangle]
pub unsafe extern "C" fn antidote_mask_spatial_bits(
    mask: *const AntidoteMask,
    out: *mut u8,
    len: usize,
) -> AntidoteStatus {
    guard(|| {
        if mask.is_null() {
            return null_ptr("mask");
        }
        if out.is_null() {
            return null_ptr("out");
        }
        let bits = (*mask).0.spatial_bits();
        if len < bits.len() {
            set_error(&format!("need {} elements, got {len}", bits.len()));
            return AntidoteStatus::BufferTooSmall;
        }
        for (dst, &b) in std::slice::from_raw_parts_mut(out, bits.len()).iter_mut().zip(bits) {
            *dst = b as u8;
        }
        AntidoteStatus::Ok
    })
}

/// Text dump of the mask ("ch: ..." plus one line of bits per spatial row).
/// Free with `antidote_string_free`.
#[no_mangle]
pub unsafe extern "C" fn antidote_mask_dump(
    mask: *const AntidoteMask,
    out: *mut *mut c_char,
) -> AntidoteStatus {
    guard(|| {
        if mask.is_null() {
            return null_ptr("mask");
        }
        if out.is_null() {
            return null_ptr("out");
        }
        let dump = (*mask).0.dump();
        match CString::new(dump) {
            Ok(s) => {
                *out = s.into_raw();
                AntidoteStatus::Ok
            }
            Err(_) => {
                set_error("dump contained a NUL byte");
                AntidoteStatus::Internal
            }
        }
    })
}

/// Zero the masked channels/columns of every sample; returns a new tensor.
#[no_mangle]
pub unsafe extern "C" fn antidote_mask_apply(
    t: *const AntidoteTensor,
    mask: *const AntidoteMask,
    out: *mut *mut AntidoteTensor,
) -> AntidoteStatus {
    guard(|| {
        if t.is_null() || mask.is_null() {
            return null_ptr("tensor/mask");
        }
        if out.is_null() {
            return null_ptr("out");
        }
        match apply_mask(&(*t).0, &(*mask).0) {
            Ok(result) => {
                *out = Box::into_raw(Box::new(AntidoteTensor(result)));
                AntidoteStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

// ---------------------------------------------------------------------------
// Model specs and FLOPs
// ---------------------------------------------------------------------------

/// Look up a built-in architecture: "toy-vgg", "vgg16-cifar",
/// "vgg16-imagenet" or "resnet56-cifar".
#[no_mangle]
pub unsafe extern "C" fn antidote_model_spec_builtin(
    name: *const c_char,
    out: *mut *mut AntidoteModelSpec,
) -> AntidoteStatus {
    guard(|| {
        if name.is_null() {
            return null_ptr("name");
        }
        if out.is_null() {
            return null_ptr("out");
        }
        let Ok(name) = CStr::from_ptr(name).to_str() else {
            return invalid("name is not valid UTF-8");
        };
        match builtin_spec(name) {
            Some(spec) => {
                *out = Box::into_raw(Box::new(AntidoteModelSpec(spec)));
                AntidoteStatus::Ok
            }
            None => invalid(&format!("unknown builtin model '{name}'")),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn antidote_model_spec_free(spec: *mut AntidoteModelSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

#[no_mangle]
pub unsafe extern "C" fn antidote_model_spec_blocks(
    spec: *const AntidoteModelSpec,
    out: *mut usize,
) -> AntidoteStatus {
    guard(|| {
        if spec.is_null() {
            return null_ptr("spec");
        }
        if out.is_null() {
            return null_ptr("out");
        }
        *out = (*spec).0.block_count();
        AntidoteStatus::Ok
    })
}

/// Total dense multiply-accumulate count of the architecture.
#[no_mangle]
pub unsafe extern "C" fn antidote_dense_flops_total(
    spec: *const AntidoteModelSpec,
    out: *mut u64,
) -> AntidoteStatus {
    guard(|| {
        if spec.is_null() {
            return null_ptr("spec");
        }
        if out.is_null() {
            return null_ptr("out");
        }
        match model_dense_flops(&(*spec).0) {
            Ok(report) => {
                *out = report.dense_total;
                AntidoteStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Full dense/dynamic FLOPs report as a JSON string for the given per-block
/// PRUNE ratios (pass null/0 for an unpruned report). Free the string with
/// `antidote_string_free`.
#[no_mangle]
pub unsafe extern "C" fn antidote_flops_report_json(
    spec: *const AntidoteModelSpec,
    prune_channel: *const f64,
    n_channel: usize,
    prune_spatial: *const f64,
    n_spatial: usize,
    out: *mut *mut c_char,
) -> AntidoteStatus {
    guard(|| {
        if spec.is_null() {
            return null_ptr("spec");
        }
        if out.is_null() {
            return null_ptr("out");
        }
        let blocks = (*spec).0.block_count();
        let channel = if prune_channel.is_null() {
            vec![0.0; blocks]
        } else {
            std::slice::from_raw_parts(prune_channel, n_channel).to_vec()
        };
        let spatial = if prune_spatial.is_null() {
            vec![0.0; blocks]
        } else {
            std::slice::from_raw_parts(prune_spatial, n_spatial).to_vec()
        };
        match dynamic_flops(&(*spec).0, &PruneRatios { channel, spatial }) {
            Ok(report) => match CString::new(report.to_json()) {
                Ok(s) => {
                    *out = s.into_raw();
                    AntidoteStatus::Ok
                }
                Err(_) => {
                    set_error("report contained a NUL byte");
                    AntidoteStatus::Internal
                }
            },
            Err(e) => status_of(&e),
        }
    })
}
