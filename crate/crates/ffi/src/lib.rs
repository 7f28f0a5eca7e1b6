//! C ABI over the core library: opaque handles, integer status codes, and a
//! thread-local error message. Status codes match the CLI exit contract:
//! 0 ok, 2 configuration, 3 i/o or format, 4 numerical failure; 1 is an
//! internal panic.

use ldp_core::checkpoint::load_checkpoint;
use ldp_core::config::RunConfig;
use ldp_core::dataset::{generate_multi_shapes, Dataset};
use ldp_core::em::{run_em, EmConfig, EmTrace, Method};
use ldp_core::error::LdpError;
use ldp_core::metrics::evaluate_dataset;
use ldp_core::nets::Networks;
use ldp_core::params::ParamStore;
use ldp_core::rng::Rng;
use ldp_core::tensor::Tensor;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn code_of(e: &LdpError) -> i32 {
    e.exit_code()
}

fn run_guarded(f: impl FnOnce() -> Result<(), LdpError> + std::panic::UnwindSafe) -> i32 {
    match catch_unwind(f) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            set_error(&e.to_string());
            code_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(&msg);
            1
        }
    }
}

/// Opaque dataset handle.
pub struct LdpDataset {
    inner: Dataset,
}

/// Opaque trained-model handle (checkpoint contents plus derived configs).
pub struct LdpModel {
    method: Method,
    em: EmConfig,
    config: RunConfig,
    store: ParamStore,
    nets: Networks,
}

/// Opaque result of one inner-loop run.
pub struct LdpRun {
    trace: EmTrace,
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ldp_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ldp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn path_from(ptr: *const c_char) -> Result<&'static Path, LdpError> {
    if ptr.is_null() {
        return Err(LdpError::Config("null path".into()));
    }
    let s = unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| LdpError::Config("path is not valid utf-8".into()))?;
    Ok(Path::new(s))
}

/// Generate a Multi-Shapes dataset. On success `*out` owns a new handle.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn ldp_dataset_generate_shapes(
    n: usize,
    size: usize,
    objects: usize,
    seed: u64,
    out: *mut *mut LdpDataset,
) -> i32 {
    run_guarded(AssertUnwindSafe(|| {
        if out.is_null() {
            return Err(LdpError::Config("null output pointer".into()));
        }
        let d = generate_multi_shapes(n, size, objects, seed, 0)?;
        unsafe { *out = Box::into_raw(Box::new(LdpDataset { inner: d })) };
        Ok(())
    }))
}

/// Read a dataset container file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` as above.
#[no_mangle]
pub unsafe extern "C" fn ldp_dataset_read(path: *const c_char, out: *mut *mut LdpDataset) -> i32 {
    run_guarded(AssertUnwindSafe(|| {
        if out.is_null() {
            return Err(LdpError::Config("null output pointer".into()));
        }
        let d = Dataset::read_file(unsafe { path_from(path) }?)?;
        unsafe { *out = Box::into_raw(Box::new(LdpDataset { inner: d })) };
        Ok(())
    }))
}

/// Write a dataset container file.
///
/// # Safety
/// `ds` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ldp_dataset_write(ds: *const LdpDataset, path: *const c_char) -> i32 {
    run_guarded(AssertUnwindSafe(|| {
        let ds = unsafe { ds.as_ref() }.ok_or_else(|| LdpError::Config("null dataset".into()))?;
        ds.inner.write_file(unsafe { path_from(path) }?)
    }))
}

/// Number of samples; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ldp_dataset_len(ds: *const LdpDataset) -> usize {
    unsafe { ds.as_ref() }.map(|d| d.inner.len()).unwrap_or(0)
}

/// Scene height in pixels.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ldp_dataset_height(ds: *const LdpDataset) -> usize {
    unsafe { ds.as_ref() }.map(|d| d.inner.height as usize).unwrap_or(0)
}

/// Scene width in pixels.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ldp_dataset_width(ds: *const LdpDataset) -> usize {
    unsafe { ds.as_ref() }.map(|d| d.inner.width as usize).unwrap_or(0)
}

/// Copy one sample out: `pixels` receives H*W intensities in [0,1] and
/// `labels` H*W owner bitmasks. Either pointer may be null to skip it.
///
/// # Safety
/// Non-null buffers must hold at least H*W elements.
#[no_mangle]
pub unsafe extern "C" fn ldp_dataset_sample(
    ds: *const LdpDataset,
    index: usize,
    pixels: *mut f64,
    labels: *mut u8,
) -> i32 {
    run_guarded(AssertUnwindSafe(|| {
        let ds = unsafe { ds.as_ref() }.ok_or_else(|| LdpError::Config("null dataset".into()))?;
        let sample = ds
            .inner
            .samples
            .get(index)
            .ok_or_else(|| LdpError::Config(format!("sample index {} out of range", index)))?;
        let m = ds.inner.pixel_count();
        if !pixels.is_null() {
            let dst = unsafe { std::slice::from_raw_parts_mut(pixels, m) };
            for (d, &p) in dst.iter_mut().zip(sample.pixels.iter()) {
                *d = p as f64 / 255.0;
            }
        }
        if !labels.is_null() {
            let dst = unsafe { std::slice::from_raw_parts_mut(labels, m) };
            dst.copy_from_slice(&sample.labels);
        }
        Ok(())
    }))
}

/// Release a dataset handle.
///
/// # Safety
/// `ds` must be null or a handle produced by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ldp_dataset_free(ds: *mut LdpDataset) {
    if !ds.is_null() {
        drop(unsafe { Box::from_raw(ds) });
    }
}

/// Load a trained model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for one pointer.
#[no_mangle]
pub unsafe extern "C" fn ldp_model_load(path: *const c_char, out: *mut *mut LdpModel) -> i32 {
    run_guarded(AssertUnwindSafe(|| {
        if out.is_null() {
            return Err(LdpError::Config("null output pointer".into()));
        }
        let ck = load_checkpoint(unsafe { path_from(path) }?)?;
        let em = ck.config.em_config()?;
        let model = LdpModel { method: ck.method, em, config: ck.config, store: ck.store, nets: ck.nets };
        unsafe { *out = Box::into_raw(Box::new(model)) };
        Ok(())
    }))
}

/// Mixture component count (background included) of a loaded model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ldp_model_components(model: *const LdpModel) -> usize {
    unsafe { model.as_ref() }.map(|m| m.em.k).unwrap_or(0)
}

/// Run the unrolled inner loop on one image (length H*W, intensities in
/// [0,1]). `seed` drives the latent initialization.
///
/// # Safety
/// `pixels` must point at `len` doubles; `out` valid for one pointer.
#[no_mangle]
pub unsafe extern "C" fn ldp_model_run(
    model: *const LdpModel,
    pixels: *const f64,
    len: usize,
    seed: u64,
    out: *mut *mut LdpRun,
) -> i32 {
    run_guarded(AssertUnwindSafe(|| {
        let model = unsafe { model.as_ref() }.ok_or_else(|| LdpError::Config("null model".into()))?;
        if out.is_null() || pixels.is_null() {
            return Err(LdpError::Config("null pointer argument".into()));
        }
        if len != model.nets.arch.pixels() {
            return Err(LdpError::Config(format!(
                "image length {} does not match the {}x{} architecture",
                len, model.nets.arch.height, model.nets.arch.width
            )));
        }
        let image = Tensor::vector(unsafe { std::slice::from_raw_parts(pixels, len) }.to_vec());
        let mut rng = Rng::seeded(seed, 0);
        let trace = run_em(&image, &model.store, &model.nets, model.method, &model.em, &mut rng)?;
        unsafe { *out = Box::into_raw(Box::new(LdpRun { trace })) };
        Ok(())
    }))
}

/// Number of inner steps recorded in a run.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ldp_run_steps(run: *const LdpRun) -> usize {
    unsafe { run.as_ref() }.map(|r| r.trace.steps.len()).unwrap_or(0)
}

/// Copy the final grouping labels (argmax of the posterior) into `out`.
///
/// # Safety
/// `out` must hold at least H*W bytes.
#[no_mangle]
pub unsafe extern "C" fn ldp_run_labels(run: *const LdpRun, out: *mut u8, len: usize) -> i32 {
    run_guarded(AssertUnwindSafe(|| {
        let run = unsafe { run.as_ref() }.ok_or_else(|| LdpError::Config("null run".into()))?;
        let labels = run.trace.labels();
        if len < labels.len() || out.is_null() {
            return Err(LdpError::Config("label buffer too small".into()));
        }
        unsafe { std::slice::from_raw_parts_mut(out, labels.len()) }.copy_from_slice(&labels);
        Ok(())
    }))
}

/// Copy the per-step losses into `out` (`ldp_run_steps` entries).
///
/// # Safety
/// `out` must hold at least `ldp_run_steps(run)` doubles.
#[no_mangle]
pub unsafe extern "C" fn ldp_run_losses(run: *const LdpRun, out: *mut f64, len: usize) -> i32 {
    run_guarded(AssertUnwindSafe(|| {
        let run = unsafe { run.as_ref() }.ok_or_else(|| LdpError::Config("null run".into()))?;
        if len < run.trace.steps.len() || out.is_null() {
            return Err(LdpError::Config("loss buffer too small".into()));
        }
        let dst = unsafe { std::slice::from_raw_parts_mut(out, run.trace.steps.len()) };
        for (d, s) in dst.iter_mut().zip(run.trace.steps.iter()) {
            *d = s.loss;
        }
        Ok(())
    }))
}

/// Copy the final posterior responsibilities (row-major H*W by K) into `out`.
///
/// # Safety
/// `out` must hold at least H*W*K doubles.
#[no_mangle]
pub unsafe extern "C" fn ldp_run_gamma(run: *const LdpRun, out: *mut f64, len: usize) -> i32 {
    run_guarded(AssertUnwindSafe(|| {
        let run = unsafe { run.as_ref() }.ok_or_else(|| LdpError::Config("null run".into()))?;
        let gamma = &run.trace.final_step().mixture.gamma;
        if len < gamma.numel() || out.is_null() {
            return Err(LdpError::Config("gamma buffer too small".into()));
        }
        unsafe { std::slice::from_raw_parts_mut(out, gamma.numel()) }.copy_from_slice(gamma.data());
        Ok(())
    }))
}

/// Release a run handle.
///
/// # Safety
/// `run` must be null or a handle produced by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ldp_run_free(run: *mut LdpRun) {
    if !run.is_null() {
        drop(unsafe { Box::from_raw(run) });
    }
}

/// Score a model on a dataset: mean AMI (background/overlap excluded) and
/// mean permutation-minimal reconstruction MSE.
///
/// # Safety
/// `ami` and `mse` must each point at one writable double.
#[no_mangle]
pub unsafe extern "C" fn ldp_evaluate(
    model: *const LdpModel,
    ds: *const LdpDataset,
    seed: u64,
    ami: *mut f64,
    mse: *mut f64,
) -> i32 {
    run_guarded(AssertUnwindSafe(|| {
        let model = unsafe { model.as_ref() }.ok_or_else(|| LdpError::Config("null model".into()))?;
        let ds = unsafe { ds.as_ref() }.ok_or_else(|| LdpError::Config("null dataset".into()))?;
        if ami.is_null() || mse.is_null() {
            return Err(LdpError::Config("null output pointer".into()));
        }
        let report = evaluate_dataset(&ds.inner, &model.store, &model.nets, model.method, &model.em, seed)?;
        unsafe {
            *ami = report.ami_mean;
            *mse = report.mse_mean;
        }
        let _ = &model.config;
        Ok(())
    }))
}

/// Release a model handle.
///
/// # Safety
/// `model` must be null or a handle produced by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ldp_model_free(model: *mut LdpModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}
