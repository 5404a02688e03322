#ifndef BCI_H
#define BCI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Bit set in [`bci_result_warnings`] when the share matrix is reducible.
#define BCI_WARNING_REDUCIBLE 1

// Bit set in [`bci_result_warnings`] when the iteration cap was reached.
#define BCI_WARNING_ITERATION_CAP 2

// Result code of every fallible call.
typedef enum BciStatus {
  BCI_STATUS_OK = 0,
  BCI_STATUS_NULL_POINTER = 1,
  BCI_STATUS_INVALID_ALPHA = 2,
  BCI_STATUS_INVALID_ARGUMENT = 3,
  BCI_STATUS_DIMENSION_MISMATCH = 4,
  BCI_STATUS_SELF_TRANSACTION = 5,
  BCI_STATUS_NEGATIVE_AMOUNT = 6,
  BCI_STATUS_PEER_OUT_OF_RANGE = 7,
  BCI_STATUS_PARSE_ERROR = 8,
  BCI_STATUS_BUFFER_TOO_SMALL = 9,
  BCI_STATUS_PANIC = 10,
} BciStatus;

typedef enum BciFormat {
  BCI_FORMAT_DENSE_CSV = 0,
  BCI_FORMAT_SPARSE_JSON = 1,
} BciFormat;

typedef enum BciStopping {
  // Stop when successive iterates agree to four decimals.
  BCI_STOPPING_FOUR_DECIMAL = 0,
  // Stop when the ∞-norm step is below `eps`.
  BCI_STOPPING_INF_NORM = 1,
} BciStopping;

typedef enum BciVote {
  BCI_VOTE_AGREED = 0,
  BCI_VOTE_MAJORITY = 1,
  BCI_VOTE_NO_MAJORITY = 2,
} BciVote;

// Opaque share ledger.
typedef struct BciLedger BciLedger;

// Opaque result of a solve.
typedef struct BciSolveResult BciSolveResult;

// Summary of a distributed run.
typedef struct BciDistSummary {
  size_t rounds;
  uint64_t messages_total;
  double divergence_from_centralized;
  bool converged;
} BciDistSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failed call on this thread, or NULL.
//
// The pointer stays valid until the next bci call on the same thread.
const char *bci_last_error_message(void);

// Creates an empty ledger for `n` peers (`n >= 2`).
//
// # Safety
// `out` must be valid for writing one pointer.
enum BciStatus bci_ledger_new(size_t n, struct BciLedger **out);

// Parses a ledger from `len` bytes in the given format.
//
// # Safety
// `data` must be valid for reading `len` bytes; `out` valid for writing one pointer.
enum BciStatus bci_ledger_from_bytes(const uint8_t *data,
                                     size_t len,
                                     enum BciFormat format,
                                     struct BciLedger **out);

// Releases a ledger. NULL is ignored.
//
// # Safety
// `ledger` must be NULL or a pointer from this library not yet freed.
void bci_ledger_free(struct BciLedger *ledger);

// Number of peers, or 0 for NULL.
//
// # Safety
// `ledger` must be NULL or a live ledger.
size_t bci_ledger_peer_count(const struct BciLedger *ledger);

// Adds `amount` to the upload from `uploader` to `downloader`.
//
// # Safety
// `ledger` must be a live ledger.
enum BciStatus bci_ledger_record(struct BciLedger *ledger,
                                 size_t uploader,
                                 size_t downloader,
                                 double amount);

// Reads one entry of the share matrix.
//
// # Safety
// `ledger` must be a live ledger; `out` valid for writing.
enum BciStatus bci_ledger_get(const struct BciLedger *ledger, size_t from, size_t to, double *out);

// Whether the transaction graph is strongly connected.
//
// # Safety
// `ledger` must be a live ledger; `out` valid for writing.
enum BciStatus bci_ledger_is_irreducible(const struct BciLedger *ledger, bool *out);

// Whether every peer's upload and download totals agree within `tol`.
//
// # Safety
// `ledger` must be a live ledger; `out` valid for writing.
enum BciStatus bci_ledger_is_balanced(const struct BciLedger *ledger, double tol, bool *out);

// Writes the free-rider peer indices into `buf` (ascending).
//
// `*out_len` always receives the number of free riders; if it exceeds
// `cap`, nothing is written and `BufferTooSmall` is returned.
//
// # Safety
// `buf` must be valid for `cap` writes (may be NULL when `cap` is 0);
// `out_len` valid for writing.
enum BciStatus bci_ledger_free_riders(const struct BciLedger *ledger,
                                      size_t *buf,
                                      size_t cap,
                                      size_t *out_len);

// Solves for the index vector.
//
// `eps` is only read for `InfNorm` stopping.
//
// # Safety
// `ledger` must be a live ledger; `out` valid for writing one pointer.
enum BciStatus bci_solve(const struct BciLedger *ledger,
                         double alpha,
                         enum BciStopping stop,
                         double eps,
                         size_t max_iterations,
                         struct BciSolveResult **out);

// Releases a solve result. NULL is ignored.
//
// # Safety
// `result` must be NULL or a pointer from [`bci_solve`] not yet freed.
void bci_result_free(struct BciSolveResult *result);

// Iteration at which the stopping rule fired (or the cap).
//
// # Safety
// `result` must be NULL or a live result; NULL yields 0.
size_t bci_result_iterations(const struct BciSolveResult *result);

// Length of the index vector.
//
// # Safety
// `result` must be NULL or a live result; NULL yields 0.
size_t bci_result_peer_count(const struct BciSolveResult *result);

// Bit mask of `BCI_WARNING_*` flags.
//
// # Safety
// `result` must be NULL or a live result; NULL yields 0.
uint32_t bci_result_warnings(const struct BciSolveResult *result);

// ∞-norm of the last step, 0 when no step was taken.
//
// # Safety
// `result` must be NULL or a live result; NULL yields NaN.
double bci_result_final_residual(const struct BciSolveResult *result);

// Copies the final index vector into `buf`, which must hold exactly `len`
// values where `len` is the peer count.
//
// # Safety
// `result` must be a live result; `buf` valid for `len` writes.
enum BciStatus bci_result_copy_x(const struct BciSolveResult *result, double *buf, size_t len);

// Copies iterate `k` (0 is the starting vector) into `buf`.
//
// # Safety
// `result` must be a live result; `buf` valid for `len` writes.
enum BciStatus bci_result_copy_iterate(const struct BciSolveResult *result,
                                       size_t k,
                                       double *buf,
                                       size_t len);

// The result as JSON (17 significant digits). Free with [`bci_string_free`].
// Returns NULL for a NULL result.
//
// # Safety
// `result` must be NULL or a live result.
char *bci_result_to_json(const struct BciSolveResult *result);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must be NULL or a string from this library not yet freed.
void bci_string_free(char *s);

// Solves once per alpha and writes the iteration counts to `out_iterations`.
//
// # Safety
// `ledger` must be a live ledger; `alphas` readable and `out_iterations`
// writable for `count` elements.
enum BciStatus bci_sweep(const struct BciLedger *ledger,
                         const double *alphas,
                         size_t count,
                         enum BciStopping stop,
                         double eps,
                         size_t max_iterations,
                         size_t *out_iterations);

// Majority vote over `count` reported values rounded to `decimals`.
//
// `*out_value` receives the winning rounded value, or NaN with `NoMajority`.
//
// # Safety
// `values` readable for `count` doubles; `out_vote` and `out_value` writable.
enum BciStatus bci_resolve_conflict(const double *values,
                                    size_t count,
                                    uint32_t decimals,
                                    enum BciVote *out_vote,
                                    double *out_value);

// Runs the index-manager simulation and copies the consensus vector into
// `x_out` (exactly the peer count in length).
//
// # Safety
// `ledger` must be a live ledger; `x_out` writable for `x_len` doubles;
// `out_summary` writable.
enum BciStatus bci_run_distributed(const struct BciLedger *ledger,
                                   double alpha,
                                   double eps,
                                   size_t max_sweeps,
                                   size_t replication,
                                   uint64_t seed,
                                   uint64_t delay_ticks,
                                   bool random_order,
                                   double *x_out,
                                   size_t x_len,
                                   struct BciDistSummary *out_summary);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BCI_H */
