//! C ABI over `diffflow`.
//!
//! Conventions:
//! - every fallible function returns a [`DfStatus`]; on failure a message is
//!   available from [`df_last_error`] on the same thread;
//! - models are opaque [`DfModel`] handles owned by the caller and released
//!   with [`df_model_free`];
//! - arrays are row-major `double` buffers whose lengths the caller passes
//!   explicitly; output buffers are caller-allocated.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use diffflow::baselines::sample_trained;
use diffflow::datasets::{generate_2d, Dataset2DKind, Dataset2DSpec};
use diffflow::dynamics::TimeGrid;
use diffflow::evaluation::{elbo_nll_bound, ode_nll, OdeOptions, SamplerConfig};
use diffflow::gradcheck::run_gradcheck;
use diffflow::training::{read_train_state, TrainState};
use diffflow::{Error, Model};
use ndarray::ArrayView2;

/// Result codes; the non-zero values other than `NullPointer`, `Panic` and
/// `BufferSize` match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfStatus {
    Ok = 0,
    NullPointer = 1,
    Usage = 2,
    Numeric = 3,
    Io = 4,
    BufferSize = 5,
    Panic = 6,
}

/// Opaque trained model.
pub struct DfModel {
    state: TrainState,
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DfStatus {
    match e.exit_code() {
        2 => DfStatus::Usage,
        3 => DfStatus::Numeric,
        _ => DfStatus::Io,
    }
}

fn fail(status: DfStatus, msg: impl Into<String>) -> DfStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, mapping library errors and panics onto status codes.
fn guard(f: impl FnOnce() -> Result<(), DfStatus>) -> DfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DfStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(DfStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

fn lib<T>(r: diffflow::Result<T>) -> Result<T, DfStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), DfStatus> {
    if p.is_null() {
        Err(fail(DfStatus::NullPointer, format!("{what} is NULL")))
    } else {
        Ok(())
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, DfStatus> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DfStatus::Usage, format!("{what} is not valid UTF-8")))
}

unsafe fn out_slice<'a>(
    p: *mut f64,
    len: usize,
    need: usize,
    what: &str,
) -> Result<&'a mut [f64], DfStatus> {
    non_null(p, what)?;
    if len < need {
        return Err(fail(
            DfStatus::BufferSize,
            format!("{what} holds {len} values, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn model_ref<'a>(m: *const DfModel) -> Result<&'a DfModel, DfStatus> {
    non_null(m, "model")?;
    Ok(&*m)
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn df_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn df_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a training checkpoint. `use_ema != 0` selects the averaged parameters.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn df_model_load(
    path: *const c_char,
    use_ema: i32,
    out: *mut *mut DfModel,
) -> DfStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = c_str(path, "path")?;
        let state = lib(read_train_state(Path::new(path)))?;
        let model = if use_ema != 0 {
            state.ema_model()
        } else {
            state.model.clone()
        };
        *out = Box::into_raw(Box::new(DfModel { state, model }));
        Ok(())
    })
}

/// Releases a handle from [`df_model_load`]; NULL is ignored.
///
/// # Safety
/// `model` must come from [`df_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn df_model_free(model: *mut DfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Data dimension of the model, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn df_model_dim(model: *const DfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.dim())
}

/// Training iteration stored in the checkpoint, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn df_model_iteration(model: *const DfModel) -> u64 {
    model.as_ref().map_or(0, |m| m.state.iteration)
}

/// Draws `n` samples into `out` (`n * dim` values). `steps == 0` uses the
/// step count in force at the end of training.
///
/// # Safety
/// `out` must point to at least `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn df_sample(
    model: *const DfModel,
    lambda: f64,
    steps: usize,
    n: usize,
    denoise: i32,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> DfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let d = m.model.dim();
        let buf = out_slice(out, out_len, n * d, "out")?;
        let cfg = SamplerConfig {
            lambda,
            steps: if steps == 0 {
                m.state.config.steps_at(m.state.iteration)
            } else {
                steps
            },
            beta: 1.0,
            final_denoise: denoise != 0,
            seed,
        };
        let x = lib(sample_trained(
            n,
            &cfg,
            m.state.config.mode,
            m.state.config.beta,
            &m.model,
        ))?;
        buf.copy_from_slice(x.as_slice().expect("standard layout"));
        Ok(())
    })
}

unsafe fn points<'a>(
    x: *const f64,
    rows: usize,
    d: usize,
) -> Result<ArrayView2<'a, f64>, DfStatus> {
    non_null(x, "x")?;
    let v = std::slice::from_raw_parts(x, rows * d);
    Ok(ArrayView2::from_shape((rows, d), v).expect("length checked"))
}

/// Exact probability-flow NLL in nats of `rows` points; `out` gets one value
/// per row.
///
/// # Safety
/// `x` must hold `rows * dim` doubles and `out` at least `rows`.
#[no_mangle]
pub unsafe extern "C" fn df_ode_nll(
    model: *const DfModel,
    x: *const f64,
    rows: usize,
    atol: f64,
    rtol: f64,
    out: *mut f64,
) -> DfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let xs = points(x, rows, m.model.dim())?;
        let buf = out_slice(out, rows, rows, "out")?;
        let opts = OdeOptions {
            atol,
            rtol,
            ..OdeOptions::default()
        };
        let rep = lib(ode_nll(xs, &m.model, &opts))?;
        buf.copy_from_slice(&rep.nats);
        Ok(())
    })
}

/// Trajectory upper bound on the NLL with `n_mc` trajectories per point on a
/// fixed grid of `steps` steps (0: end-of-training count). Writes the mean and
/// standard error per row.
///
/// # Safety
/// `x` must hold `rows * dim` doubles; `mean` and `std_err` at least `rows`.
#[no_mangle]
pub unsafe extern "C" fn df_elbo_nll(
    model: *const DfModel,
    x: *const f64,
    rows: usize,
    steps: usize,
    n_mc: usize,
    seed: u64,
    mean: *mut f64,
    std_err: *mut f64,
) -> DfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let xs = points(x, rows, m.model.dim())?;
        let mb = out_slice(mean, rows, rows, "mean")?;
        let sb = out_slice(std_err, rows, rows, "std_err")?;
        let n = if steps == 0 {
            m.state.config.steps_at(m.state.iteration)
        } else {
            steps
        };
        let grid = lib(TimeGrid::fixed(n, m.model.horizon, m.state.config.beta))?;
        let est = lib(elbo_nll_bound(xs, &grid, &m.model, n_mc, seed))?;
        for (i, e) in est.iter().enumerate() {
            mb[i] = e.mean;
            sb[i] = e.std_err;
        }
        Ok(())
    })
}

/// Adjoint-vs-oracle check on a random instance. `passed` is set to 1 when the
/// oracle error is within tolerance.
///
/// # Safety
/// The three output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn df_gradcheck(
    dims: usize,
    steps: usize,
    seed: u64,
    oracle_error: *mut f64,
    fd_error: *mut f64,
    passed: *mut i32,
) -> DfStatus {
    guard(|| {
        non_null(oracle_error, "oracle_error")?;
        non_null(fd_error, "fd_error")?;
        non_null(passed, "passed")?;
        let r = lib(run_gradcheck(dims, steps, seed, false, 20))?;
        *oracle_error = r.oracle_error;
        *fd_error = r.fd_error;
        *passed = i32::from(r.passed());
        Ok(())
    })
}

/// Writes `n` points of the named synthetic dataset into `out` (`2 n` values).
///
/// # Safety
/// `kind` must be NUL-terminated; `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn df_generate_2d(
    kind: *const c_char,
    n: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> DfStatus {
    guard(|| {
        let name = c_str(kind, "kind")?;
        let kind = lib(Dataset2DKind::from_name(name))?;
        let buf = out_slice(out, out_len, 2 * n, "out")?;
        let x = generate_2d(&Dataset2DSpec::new(kind, n, seed));
        buf.copy_from_slice(x.as_slice().expect("standard layout"));
        Ok(())
    })
}
