//! C ABI for the `bci` crate.
//!
//! Ledgers and solve results are handed out as opaque heap pointers that the
//! caller must release with the matching `*_free` function. Every fallible
//! call returns a [`BciStatus`]; on failure a description is available from
//! [`bci_last_error_message`] on the same thread. Panics never cross the
//! boundary: they are caught and reported as [`BciStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bci::distributed::{self, DistError, DistOptions, Schedule, VoteOutcome};
use bci::{
    BciParams, LedgerError, LedgerFormat, PeerId, ShareMatrix, SolveResult, SolveWarning, SolverError,
    Stopping,
};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BciStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidAlpha = 2,
    InvalidArgument = 3,
    DimensionMismatch = 4,
    SelfTransaction = 5,
    NegativeAmount = 6,
    PeerOutOfRange = 7,
    ParseError = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BciStopping {
    /// Stop when successive iterates agree to four decimals.
    FourDecimal = 0,
    /// Stop when the ∞-norm step is below `eps`.
    InfNorm = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BciFormat {
    DenseCsv = 0,
    SparseJson = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BciVote {
    Agreed = 0,
    Majority = 1,
    NoMajority = 2,
}

/// Bit set in [`bci_result_warnings`] when the share matrix is reducible.
pub const BCI_WARNING_REDUCIBLE: u32 = 1;
/// Bit set in [`bci_result_warnings`] when the iteration cap was reached.
pub const BCI_WARNING_ITERATION_CAP: u32 = 2;

/// Opaque share ledger.
pub struct BciLedger(ShareMatrix);

/// Opaque result of a solve.
pub struct BciSolveResult(SolveResult);

/// Summary of a distributed run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BciDistSummary {
    pub rounds: usize,
    pub messages_total: u64,
    pub divergence_from_centralized: f64,
    pub converged: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(BciStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(BciStatus::NullPointer, format!("{what} is null"))
    }
}

impl From<LedgerError> for Failure {
    fn from(e: LedgerError) -> Self {
        let status = match e {
            LedgerError::SelfTransaction(_) => BciStatus::SelfTransaction,
            LedgerError::NegativeAmount(_) => BciStatus::NegativeAmount,
            LedgerError::PeerOutOfRange { .. } => BciStatus::PeerOutOfRange,
            LedgerError::Parse { .. } | LedgerError::NonSquare { .. } | LedgerError::Io(_) => {
                BciStatus::ParseError
            }
            LedgerError::NonFiniteAmount(_) | LedgerError::TooFewPeers(_) => BciStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<SolverError> for Failure {
    fn from(e: SolverError) -> Self {
        let status = match e {
            SolverError::InvalidAlpha(_) => BciStatus::InvalidAlpha,
            SolverError::DimensionMismatch { .. } => BciStatus::DimensionMismatch,
            _ => BciStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<DistError> for Failure {
    fn from(e: DistError) -> Self {
        match e {
            DistError::Solver(inner) => inner.into(),
            other => Failure(BciStatus::InvalidArgument, other.to_string()),
        }
    }
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nuls replaced");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BciStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            BciStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("panic inside bci".to_string());
            BciStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: caller guarantees `p` is null or valid for reads.
    unsafe { p.as_ref() }.ok_or_else(|| Failure::null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: caller guarantees `p` is null or valid for writes.
    unsafe { p.as_mut() }.ok_or_else(|| Failure::null(what))
}

fn stopping(kind: BciStopping, eps: f64) -> Stopping {
    match kind {
        BciStopping::FourDecimal => Stopping::FourDecimalEquality,
        BciStopping::InfNorm => Stopping::InfNormTol(eps),
    }
}

/// Message describing the last failed call on this thread, or NULL.
///
/// The pointer stays valid until the next bci call on the same thread.
#[no_mangle]
pub extern "C" fn bci_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates an empty ledger for `n` peers (`n >= 2`).
///
/// # Safety
/// `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn bci_ledger_new(n: usize, out: *mut *mut BciLedger) -> BciStatus {
    guard(|| {
        let out = unsafe { deref_mut(out, "out") }?;
        let ledger = ShareMatrix::new(n)?;
        *out = Box::into_raw(Box::new(BciLedger(ledger)));
        Ok(())
    })
}

/// Parses a ledger from `len` bytes in the given format.
///
/// # Safety
/// `data` must be valid for reading `len` bytes; `out` valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn bci_ledger_from_bytes(
    data: *const u8,
    len: usize,
    format: BciFormat,
    out: *mut *mut BciLedger,
) -> BciStatus {
    guard(|| {
        let out = unsafe { deref_mut(out, "out") }?;
        if data.is_null() {
            return Err(Failure::null("data"));
        }
        // SAFETY: non-null and readable for `len` bytes per the contract.
        let bytes = unsafe { std::slice::from_raw_parts(data, len) };
        let format = match format {
            BciFormat::DenseCsv => LedgerFormat::DenseCsv,
            BciFormat::SparseJson => LedgerFormat::SparseJson,
        };
        let ledger = ShareMatrix::load(bytes, format)?;
        *out = Box::into_raw(Box::new(BciLedger(ledger)));
        Ok(())
    })
}

/// Releases a ledger. NULL is ignored.
///
/// # Safety
/// `ledger` must be NULL or a pointer from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bci_ledger_free(ledger: *mut BciLedger) {
    if !ledger.is_null() {
        // SAFETY: allocated by Box::into_raw in this crate.
        drop(unsafe { Box::from_raw(ledger) });
    }
}

/// Number of peers, or 0 for NULL.
///
/// # Safety
/// `ledger` must be NULL or a live ledger.
#[no_mangle]
pub unsafe extern "C" fn bci_ledger_peer_count(ledger: *const BciLedger) -> usize {
    unsafe { ledger.as_ref() }.map_or(0, |l| l.0.n())
}

/// Adds `amount` to the upload from `uploader` to `downloader`.
///
/// # Safety
/// `ledger` must be a live ledger.
#[no_mangle]
pub unsafe extern "C" fn bci_ledger_record(
    ledger: *mut BciLedger,
    uploader: usize,
    downloader: usize,
    amount: f64,
) -> BciStatus {
    guard(|| {
        let ledger = unsafe { deref_mut(ledger, "ledger") }?;
        ledger
            .0
            .record_transaction(PeerId(uploader), PeerId(downloader), amount)?;
        Ok(())
    })
}

/// Reads one entry of the share matrix.
///
/// # Safety
/// `ledger` must be a live ledger; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn bci_ledger_get(
    ledger: *const BciLedger,
    from: usize,
    to: usize,
    out: *mut f64,
) -> BciStatus {
    guard(|| {
        let ledger = unsafe { deref(ledger, "ledger") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        let n = ledger.0.n();
        if from >= n || to >= n {
            return Err(Failure(
                BciStatus::PeerOutOfRange,
                format!("({from}, {to}) outside {n} peers"),
            ));
        }
        *out = ledger.0.get(PeerId(from), PeerId(to));
        Ok(())
    })
}

/// Whether the transaction graph is strongly connected.
///
/// # Safety
/// `ledger` must be a live ledger; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn bci_ledger_is_irreducible(ledger: *const BciLedger, out: *mut bool) -> BciStatus {
    guard(|| {
        let ledger = unsafe { deref(ledger, "ledger") }?;
        *unsafe { deref_mut(out, "out") }? = ledger.0.is_irreducible();
        Ok(())
    })
}

/// Whether every peer's upload and download totals agree within `tol`.
///
/// # Safety
/// `ledger` must be a live ledger; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn bci_ledger_is_balanced(
    ledger: *const BciLedger,
    tol: f64,
    out: *mut bool,
) -> BciStatus {
    guard(|| {
        let ledger = unsafe { deref(ledger, "ledger") }?;
        *unsafe { deref_mut(out, "out") }? = ledger.0.is_balanced(tol);
        Ok(())
    })
}

/// Writes the free-rider peer indices into `buf` (ascending).
///
/// `*out_len` always receives the number of free riders; if it exceeds
/// `cap`, nothing is written and `BufferTooSmall` is returned.
///
/// # Safety
/// `buf` must be valid for `cap` writes (may be NULL when `cap` is 0);
/// `out_len` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn bci_ledger_free_riders(
    ledger: *const BciLedger,
    buf: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> BciStatus {
    guard(|| {
        let ledger = unsafe { deref(ledger, "ledger") }?;
        let out_len = unsafe { deref_mut(out_len, "out_len") }?;
        let riders: Vec<usize> = ledger.0.free_riders().into_iter().map(PeerId::index).collect();
        *out_len = riders.len();
        if riders.len() > cap {
            return Err(Failure(
                BciStatus::BufferTooSmall,
                format!("need {} slots, have {cap}", riders.len()),
            ));
        }
        if !riders.is_empty() {
            if buf.is_null() {
                return Err(Failure::null("buf"));
            }
            // SAFETY: writable for `cap >= riders.len()` elements.
            unsafe { ptr::copy_nonoverlapping(riders.as_ptr(), buf, riders.len()) };
        }
        Ok(())
    })
}

/// Solves for the index vector.
///
/// `eps` is only read for `InfNorm` stopping.
///
/// # Safety
/// `ledger` must be a live ledger; `out` valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn bci_solve(
    ledger: *const BciLedger,
    alpha: f64,
    stop: BciStopping,
    eps: f64,
    max_iterations: usize,
    out: *mut *mut BciSolveResult,
) -> BciStatus {
    guard(|| {
        let ledger = unsafe { deref(ledger, "ledger") }?;
        let out = unsafe { deref_mut(out, "out") }?;
        let params = BciParams {
            alpha,
            stopping: stopping(stop, eps),
            max_iterations,
        };
        let result = bci::solve(&ledger.0, &params)?;
        *out = Box::into_raw(Box::new(BciSolveResult(result)));
        Ok(())
    })
}

/// Releases a solve result. NULL is ignored.
///
/// # Safety
/// `result` must be NULL or a pointer from [`bci_solve`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bci_result_free(result: *mut BciSolveResult) {
    if !result.is_null() {
        // SAFETY: allocated by Box::into_raw in this crate.
        drop(unsafe { Box::from_raw(result) });
    }
}

/// Iteration at which the stopping rule fired (or the cap).
///
/// # Safety
/// `result` must be NULL or a live result; NULL yields 0.
#[no_mangle]
pub unsafe extern "C" fn bci_result_iterations(result: *const BciSolveResult) -> usize {
    unsafe { result.as_ref() }.map_or(0, |r| r.0.iterations)
}

/// Length of the index vector.
///
/// # Safety
/// `result` must be NULL or a live result; NULL yields 0.
#[no_mangle]
pub unsafe extern "C" fn bci_result_peer_count(result: *const BciSolveResult) -> usize {
    unsafe { result.as_ref() }.map_or(0, |r| r.0.x.len())
}

/// Bit mask of `BCI_WARNING_*` flags.
///
/// # Safety
/// `result` must be NULL or a live result; NULL yields 0.
#[no_mangle]
pub unsafe extern "C" fn bci_result_warnings(result: *const BciSolveResult) -> u32 {
    unsafe { result.as_ref() }.map_or(0, |r| {
        r.0.warnings.iter().fold(0, |acc, w| {
            acc | match w {
                SolveWarning::ReducibleMatrix => BCI_WARNING_REDUCIBLE,
                SolveWarning::HitIterationCap => BCI_WARNING_ITERATION_CAP,
            }
        })
    })
}

/// ∞-norm of the last step, 0 when no step was taken.
///
/// # Safety
/// `result` must be NULL or a live result; NULL yields NaN.
#[no_mangle]
pub unsafe extern "C" fn bci_result_final_residual(result: *const BciSolveResult) -> f64 {
    unsafe { result.as_ref() }.map_or(f64::NAN, |r| r.0.final_residual())
}

fn copy_vector(values: &[f64], buf: *mut f64, len: usize) -> Result<(), Failure> {
    if len != values.len() {
        return Err(Failure(
            BciStatus::DimensionMismatch,
            format!("buffer holds {len} values, vector has {}", values.len()),
        ));
    }
    if buf.is_null() {
        return Err(Failure::null("buf"));
    }
    // SAFETY: caller provides `len` writable doubles.
    unsafe { ptr::copy_nonoverlapping(values.as_ptr(), buf, len) };
    Ok(())
}

/// Copies the final index vector into `buf`, which must hold exactly `len`
/// values where `len` is the peer count.
///
/// # Safety
/// `result` must be a live result; `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn bci_result_copy_x(
    result: *const BciSolveResult,
    buf: *mut f64,
    len: usize,
) -> BciStatus {
    guard(|| {
        let result = unsafe { deref(result, "result") }?;
        copy_vector(result.0.x.values(), buf, len)
    })
}

/// Copies iterate `k` (0 is the starting vector) into `buf`.
///
/// # Safety
/// `result` must be a live result; `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn bci_result_copy_iterate(
    result: *const BciSolveResult,
    k: usize,
    buf: *mut f64,
    len: usize,
) -> BciStatus {
    guard(|| {
        let result = unsafe { deref(result, "result") }?;
        let row = result.0.history.get(k).ok_or_else(|| {
            Failure(
                BciStatus::InvalidArgument,
                format!("iterate {k} beyond {}", result.0.iterations),
            )
        })?;
        copy_vector(row.values(), buf, len)
    })
}

/// The result as JSON (17 significant digits). Free with [`bci_string_free`].
/// Returns NULL for a NULL result.
///
/// # Safety
/// `result` must be NULL or a live result.
#[no_mangle]
pub unsafe extern "C" fn bci_result_to_json(result: *const BciSolveResult) -> *mut c_char {
    match unsafe { result.as_ref() } {
        Some(r) => CString::new(r.0.to_json()).map_or(ptr::null_mut(), CString::into_raw),
        None => ptr::null_mut(),
    }
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must be NULL or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bci_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: produced by CString::into_raw in this crate.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Solves once per alpha and writes the iteration counts to `out_iterations`.
///
/// # Safety
/// `ledger` must be a live ledger; `alphas` readable and `out_iterations`
/// writable for `count` elements.
#[no_mangle]
pub unsafe extern "C" fn bci_sweep(
    ledger: *const BciLedger,
    alphas: *const f64,
    count: usize,
    stop: BciStopping,
    eps: f64,
    max_iterations: usize,
    out_iterations: *mut usize,
) -> BciStatus {
    guard(|| {
        let ledger = unsafe { deref(ledger, "ledger") }?;
        if count == 0 {
            return Ok(());
        }
        if alphas.is_null() || out_iterations.is_null() {
            return Err(Failure::null("alphas or out_iterations"));
        }
        // SAFETY: readable for `count` doubles.
        let alphas = unsafe { std::slice::from_raw_parts(alphas, count) };
        let points = bci::sweep_alpha(&ledger.0, alphas, stopping(stop, eps), max_iterations)?;
        for (i, p) in points.iter().enumerate() {
            // SAFETY: writable for `count` elements.
            unsafe { *out_iterations.add(i) = p.iterations };
        }
        Ok(())
    })
}

/// Majority vote over `count` reported values rounded to `decimals`.
///
/// `*out_value` receives the winning rounded value, or NaN with `NoMajority`.
///
/// # Safety
/// `values` readable for `count` doubles; `out_vote` and `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn bci_resolve_conflict(
    values: *const f64,
    count: usize,
    decimals: u32,
    out_vote: *mut BciVote,
    out_value: *mut f64,
) -> BciStatus {
    guard(|| {
        let out_vote = unsafe { deref_mut(out_vote, "out_vote") }?;
        let out_value = unsafe { deref_mut(out_value, "out_value") }?;
        if count == 0 || values.is_null() {
            return Err(Failure(
                BciStatus::InvalidArgument,
                "at least one report is required".into(),
            ));
        }
        // SAFETY: readable for `count` doubles.
        let values = unsafe { std::slice::from_raw_parts(values, count) };
        let reports: Vec<(PeerId, f64)> = values.iter().enumerate().map(|(i, &v)| (PeerId(i), v)).collect();
        (*out_vote, *out_value) = match distributed::resolve_conflict(&reports, decimals) {
            VoteOutcome::Agreed(v) => (BciVote::Agreed, v),
            VoteOutcome::Majority(v) => (BciVote::Majority, v),
            VoteOutcome::NoMajority => (BciVote::NoMajority, f64::NAN),
        };
        Ok(())
    })
}

/// Runs the index-manager simulation and copies the consensus vector into
/// `x_out` (exactly the peer count in length).
///
/// # Safety
/// `ledger` must be a live ledger; `x_out` writable for `x_len` doubles;
/// `out_summary` writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn bci_run_distributed(
    ledger: *const BciLedger,
    alpha: f64,
    eps: f64,
    max_sweeps: usize,
    replication: usize,
    seed: u64,
    delay_ticks: u64,
    random_order: bool,
    x_out: *mut f64,
    x_len: usize,
    out_summary: *mut BciDistSummary,
) -> BciStatus {
    guard(|| {
        let ledger = unsafe { deref(ledger, "ledger") }?;
        let out_summary = unsafe { deref_mut(out_summary, "out_summary") }?;
        let params = BciParams {
            alpha,
            stopping: Stopping::InfNormTol(eps),
            max_iterations: max_sweeps,
        };
        let assignment = distributed::assign_managers(ledger.0.n(), replication, seed)?;
        let options = DistOptions {
            schedule: if random_order {
                Schedule::RandomOrder(seed)
            } else {
                Schedule::RoundRobin
            },
            delay_ticks,
            ..DistOptions::default()
        };
        let (report, _) = distributed::run_distributed_with(&ledger.0, &params, &assignment, &options)?;
        copy_vector(report.x.values(), x_out, x_len)?;
        *out_summary = BciDistSummary {
            rounds: report.rounds,
            messages_total: report.messages_total,
            divergence_from_centralized: report.divergence_from_centralized,
            converged: report.converged,
        };
        Ok(())
    })
}
