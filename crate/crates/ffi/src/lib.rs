//! C interface to `nndca`.
//!
//! Networks and grids are opaque handles created by `*_load` / `*_from_json`
//! and released with the matching `*_free`. Every fallible call returns an
//! [`NndcaStatus`]; on failure a description is available from
//! [`nndca_last_error`] on the same thread. Output arrays are caller-owned
//! and their lengths are checked.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nndca::dca::{dca_solve, initial_guess, DcaConfig, DcaStatus};
use nndca::opf::{evaluate_allocation, GridCase};
use nndca::oracle::enumerate_solve;
use nndca::penalty::{certify, CertifyConfig};
use nndca::{assemble, CostSpec, Error, GeneralForm, InputDomain, ReluNetwork};

/// Result of every fallible call. Codes 2–6 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NndcaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Infeasible = 3,
    Convergence = 4,
    SizeCap = 5,
    Numerical = 6,
    Io = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NndcaDcaStatus {
    ConvergedComplementary = 0,
    ConvergedNoncomplementary = 1,
    IterationCap = 2,
    SubproblemFailure = 3,
}

impl From<DcaStatus> for NndcaDcaStatus {
    fn from(s: DcaStatus) -> Self {
        match s {
            DcaStatus::ConvergedComplementary => NndcaDcaStatus::ConvergedComplementary,
            DcaStatus::ConvergedNoncomplementary => NndcaDcaStatus::ConvergedNoncomplementary,
            DcaStatus::IterationCap => NndcaDcaStatus::IterationCap,
            DcaStatus::SubproblemFailure => NndcaDcaStatus::SubproblemFailure,
        }
    }
}

/// Opaque trained network.
pub struct NndcaNetwork {
    inner: ReluNetwork,
}

/// Opaque grid case.
pub struct NndcaGrid {
    inner: GridCase,
}

/// Box `lower <= d <= upper` of length `dim`, with `Σd = total` when
/// `has_total` is nonzero. The network output is minimized.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct NndcaDomain {
    pub lower: *const f64,
    pub upper: *const f64,
    pub dim: usize,
    pub has_total: i32,
    pub total: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct NndcaDcaOptions {
    pub rho: f64,
    pub eps_tol: f64,
    pub max_iters: usize,
    pub comp_tol: f64,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct NndcaSolveResult {
    pub objective: f64,
    pub penalty_residual: f64,
    pub iterations: usize,
    pub rho: f64,
    pub status: NndcaDcaStatus,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(NndcaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.root() {
            Error::Infeasible(_) | Error::InfeasibleDomain(_) | Error::DataGeneration { .. } => {
                NndcaStatus::Infeasible
            }
            Error::DegenerateNetwork { .. }
            | Error::RelaxationFailed(_)
            | Error::StationarityViolation(_)
            | Error::FineTuneFailed { .. }
            | Error::Subproblem { .. } => NndcaStatus::Convergence,
            Error::SizeCap { .. } => NndcaStatus::SizeCap,
            Error::Numerical(_) => NndcaStatus::Numerical,
            Error::Io { .. } => NndcaStatus::Io,
            _ => NndcaStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(NndcaStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(NndcaStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NndcaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NndcaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("internal panic: {msg}"));
            NndcaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(
    p: *mut f64,
    len: usize,
    need: usize,
    what: &str,
) -> Result<&'a mut [f64], Failure> {
    if len != need {
        return Err(invalid(format!("{what} has length {len}, expected {need}")));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn write_out<T>(p: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(value);
    Ok(())
}

unsafe fn net_ref<'a>(net: *const NndcaNetwork) -> Result<&'a ReluNetwork, Failure> {
    net.as_ref()
        .map(|n| &n.inner)
        .ok_or_else(|| null("network"))
}

unsafe fn grid_ref<'a>(grid: *const NndcaGrid) -> Result<&'a GridCase, Failure> {
    grid.as_ref().map(|g| &g.inner).ok_or_else(|| null("grid"))
}

unsafe fn problem<'a>(
    net: *const NndcaNetwork,
    domain: *const NndcaDomain,
) -> Result<(&'a ReluNetwork, InputDomain, GeneralForm), Failure> {
    let net = net_ref(net)?;
    let d = domain.as_ref().ok_or_else(|| null("domain"))?;
    let lower = slice_arg(d.lower, d.dim, "domain.lower")?.to_vec();
    let upper = slice_arg(d.upper, d.dim, "domain.upper")?.to_vec();
    let dom = InputDomain::new(lower, upper, (d.has_total != 0).then_some(d.total))?;
    let gf = assemble(net, &dom, &CostSpec::minimize_output())?;
    Ok((net, dom, gf))
}

fn dca_config(o: &NndcaDcaOptions) -> DcaConfig {
    DcaConfig {
        rho: o.rho,
        eps_tol: o.eps_tol,
        max_iters: o.max_iters,
        comp_tol: o.comp_tol,
        ..DcaConfig::default()
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nndca_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parses a network document.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nndca_network_from_json(
    json: *const c_char,
    out: *mut *mut NndcaNetwork,
) -> NndcaStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let inner = ReluNetwork::from_json(text)?;
        write_out(out, Box::into_raw(Box::new(NndcaNetwork { inner })), "out")
    })
}

/// Reads a network document from a file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nndca_network_load(
    path: *const c_char,
    out: *mut *mut NndcaNetwork,
) -> NndcaStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let inner = ReluNetwork::load(path)?;
        write_out(out, Box::into_raw(Box::new(NndcaNetwork { inner })), "out")
    })
}

/// # Safety
/// `net` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn nndca_network_free(net: *mut NndcaNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// # Safety
/// `net` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn nndca_network_input_dim(net: *const NndcaNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.inner.input_dim())
}

/// # Safety
/// `net` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn nndca_network_output_dim(net: *const NndcaNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.inner.output_dim())
}

/// Evaluates the network at `input[0..input_len]` into `output[0..output_len]`.
///
/// # Safety
/// Arrays must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn nndca_network_forward(
    net: *const NndcaNetwork,
    input: *const f64,
    input_len: usize,
    output: *mut f64,
    output_len: usize,
) -> NndcaStatus {
    guard(|| {
        let net = net_ref(net)?;
        let x = slice_arg(input, input_len, "input")?;
        let y = net.forward(x)?;
        out_slice(output, output_len, y.len(), "output")?.copy_from_slice(y.as_slice());
        Ok(())
    })
}

/// Defaults matching the command-line tool with `rho = 1`.
#[no_mangle]
pub extern "C" fn nndca_dca_options_default() -> NndcaDcaOptions {
    let d = DcaConfig::default();
    NndcaDcaOptions {
        rho: d.rho,
        eps_tol: d.eps_tol,
        max_iters: d.max_iters,
        comp_tol: d.comp_tol,
        seed: 0,
    }
}

/// Runs DCA from a random feasible start drawn with `options.seed` and writes
/// the final input into `d_out[0..d_len]`.
///
/// # Safety
/// Pointers must be valid; `d_out` must hold `d_len` elements.
#[no_mangle]
pub unsafe extern "C" fn nndca_dca_solve(
    net: *const NndcaNetwork,
    domain: *const NndcaDomain,
    options: *const NndcaDcaOptions,
    d_out: *mut f64,
    d_len: usize,
    result: *mut NndcaSolveResult,
) -> NndcaStatus {
    guard(|| {
        let (net, dom, gf) = problem(net, domain)?;
        let opts = options.as_ref().ok_or_else(|| null("options"))?;
        let init = initial_guess(net, &dom, opts.seed)?;
        let res = dca_solve(&gf, &dca_config(opts), &init)?;
        out_slice(d_out, d_len, res.d_star.len(), "d_out")?.copy_from_slice(res.d_star.as_slice());
        write_out(
            result,
            NndcaSolveResult {
                objective: res.objective,
                penalty_residual: res.penalty_residual,
                iterations: res.iterations,
                rho: res.rho,
                status: res.status.into(),
            },
            "result",
        )
    })
}

/// Certifies a penalty bound and fine-tunes it. `options.rho` is ignored;
/// the other fields configure the fine-tuning DCA runs.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn nndca_certify(
    net: *const NndcaNetwork,
    domain: *const NndcaDomain,
    options: *const NndcaDcaOptions,
    rho_bar: *mut f64,
    rho_star: *mut f64,
) -> NndcaStatus {
    guard(|| {
        let (net, dom, gf) = problem(net, domain)?;
        let opts = options.as_ref().ok_or_else(|| null("options"))?;
        let cfg = CertifyConfig {
            seed: opts.seed,
            ..CertifyConfig::default()
        };
        let c = certify(net, &gf, &dom, &cfg, &dca_config(opts))?;
        write_out(rho_bar, c.rho_bar(), "rho_bar")?;
        write_out(rho_star, c.rho_star(), "rho_star")
    })
}

/// Global minimum by enumerating activation patterns; fails with
/// `SIZE_CAP` when the network has more than `cap` hidden neurons.
///
/// # Safety
/// Pointers must be valid; `d_out` must hold `d_len` elements.
#[no_mangle]
pub unsafe extern "C" fn nndca_oracle(
    net: *const NndcaNetwork,
    domain: *const NndcaDomain,
    cap: usize,
    d_out: *mut f64,
    d_len: usize,
    objective: *mut f64,
) -> NndcaStatus {
    guard(|| {
        let (_, _, gf) = problem(net, domain)?;
        let res = enumerate_solve(&gf, cap)?;
        out_slice(d_out, d_len, res.best_d.len(), "d_out")?.copy_from_slice(res.best_d.as_slice());
        write_out(objective, res.best_objective, "objective")
    })
}

/// Parses a grid case document.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nndca_grid_from_json(
    json: *const c_char,
    out: *mut *mut NndcaGrid,
) -> NndcaStatus {
    guard(|| {
        let inner = GridCase::from_json(str_arg(json, "json")?)?;
        write_out(out, Box::into_raw(Box::new(NndcaGrid { inner })), "out")
    })
}

/// Reads a grid case document from a file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nndca_grid_load(
    path: *const c_char,
    out: *mut *mut NndcaGrid,
) -> NndcaStatus {
    guard(|| {
        let inner = GridCase::load(str_arg(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(NndcaGrid { inner })), "out")
    })
}

/// # Safety
/// `grid` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn nndca_grid_free(grid: *mut NndcaGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// # Safety
/// `grid` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn nndca_grid_buses(grid: *const NndcaGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.inner.buses)
}

/// # Safety
/// `grid` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn nndca_grid_data_centers(grid: *const NndcaGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.inner.data_centers())
}

/// Solves the OPF with data-center demands `dc[0..dc_len]`, writes the LMP of
/// every bus into `pi_out[0..pi_len]` and the data centers' charge into
/// `charge`.
///
/// # Safety
/// Pointers must be valid; arrays must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn nndca_opf_lmps(
    grid: *const NndcaGrid,
    dc: *const f64,
    dc_len: usize,
    pi_out: *mut f64,
    pi_len: usize,
    charge: *mut f64,
) -> NndcaStatus {
    guard(|| {
        let grid = grid_ref(grid)?;
        let dc = slice_arg(dc, dc_len, "dc")?;
        let (sol, c) = evaluate_allocation(grid, dc)?;
        out_slice(pi_out, pi_len, sol.pi.len(), "pi_out")?.copy_from_slice(&sol.pi);
        write_out(charge, c, "charge")
    })
}
