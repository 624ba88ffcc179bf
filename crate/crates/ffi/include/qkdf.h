#ifndef QKDF_H
#define QKDF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QkdfStatus {
  QKDF_STATUS_OK = 0,
  QKDF_STATUS_NULL_POINTER = 1,
  QKDF_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The inputs admit no positive secret key.
   */
  QKDF_STATUS_NO_KEY = 3,
  /**
   * Configuration could not be loaded or is inconsistent.
   */
  QKDF_STATUS_CONFIG = 4,
  /**
   * A two-party run aborted.
   */
  QKDF_STATUS_PROTOCOL = 5,
  QKDF_STATUS_BUFFER_TOO_SMALL = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  QKDF_STATUS_INTERNAL = 7,
} QkdfStatus;

/**
 * A loaded experiment preset.
 */
typedef struct QkdfPreset QkdfPreset;

/**
 * Result of a loopback session: both parties' outcomes.
 */
typedef struct QkdfSession QkdfSession;

typedef struct QkdfOptimum {
  double skr;
  double p_z;
  double mu1;
  double mu2;
  double p_mu1;
} QkdfOptimum;

typedef struct QkdfCell {
  uint64_t sent;
  uint64_t detected;
  uint64_t errors;
} QkdfCell;

/**
 * Per-basis tallies, each indexed `[signal, decoy]`.
 */
typedef struct QkdfTallies {
  struct QkdfCell z[2];
  struct QkdfCell x[2];
  double duration_s;
} QkdfTallies;

typedef struct QkdfKeyResult {
  /**
   * Set when the tallies are too thin for the decoy bounds; all other
   * fields are then zero.
   */
  bool infeasible;
  double s_z0_l;
  double s_z1_l;
  double s_x1_l;
  double v_x1_u;
  double phi_z_u;
  uint64_t secret_len;
  double skr;
} QkdfKeyResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *qkdf_version(void);

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next call into the library from this thread.
 */
const char *qkdf_last_error(void);

/**
 * # Safety
 * `s` must come from this library and not be freed already. NULL is a no-op.
 */
void qkdf_string_free(char *s);

/**
 * Loads a built-in preset, a preset from `QKDF_CONFIG_DIR`, or a `.toml`
 * file path.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` writable.
 */
enum QkdfStatus qkdf_preset_load(const char *name, struct QkdfPreset **out);

/**
 * # Safety
 * `p` must come from [`qkdf_preset_load`]. NULL is a no-op.
 */
void qkdf_preset_free(struct QkdfPreset *p);

/**
 * Replaces the preset's total channel loss.
 *
 * # Safety
 * `p` must be a live preset.
 */
enum QkdfStatus qkdf_preset_set_loss_db(struct QkdfPreset *p, double loss_db);

/**
 * # Safety
 * `out` must be writable.
 */
enum QkdfStatus qkdf_binary_entropy(double p, double *out);

/**
 * Effective detection efficiency at `incident_rate` photons per second for
 * the preset's detector.
 *
 * # Safety
 * `p` must be a live preset and `out` writable.
 */
enum QkdfStatus qkdf_deadtime_efficiency(const struct QkdfPreset *p,
                                         double incident_rate,
                                         double *out);

/**
 * Optimized protocol parameters and key rate at the preset's loss.
 *
 * # Safety
 * `p` must be a live preset and `out` writable.
 */
enum QkdfStatus qkdf_optimize(const struct QkdfPreset *p, struct QkdfOptimum *out);

/**
 * Samples tallies for `duration_s` seconds of the preset's channel.
 *
 * # Safety
 * `p` must be a live preset and `out` writable.
 */
enum QkdfStatus qkdf_sample_tallies(const struct QkdfPreset *p,
                                    double duration_s,
                                    uint64_t seed,
                                    struct QkdfTallies *out);

/**
 * Decoy bounds and secret-key length for `tallies` under the preset's
 * protocol parameters, with reconciliation efficiency `f`. Thin tallies set
 * `infeasible` and still return `Ok`.
 *
 * # Safety
 * `p` must be a live preset, `tallies` readable and `out` writable.
 */
enum QkdfStatus qkdf_key_length(const struct QkdfPreset *p,
                                const struct QkdfTallies *tallies,
                                double f,
                                struct QkdfKeyResult *out);

/**
 * Compresses `in_len` bits to `out_len` bits with the hash selected by
 * `seed`. `out` must hold `out_len` bytes.
 *
 * # Safety
 * `input` must hold `in_len` bytes, `seed` 32 bytes, `out` `out_len` bytes.
 */
enum QkdfStatus qkdf_pa_compress(const uint8_t *input,
                                 size_t in_len,
                                 size_t out_len,
                                 const uint8_t *seed,
                                 uint8_t *out);

/**
 * Reconciles Bob's frame against Alice's in-process. On return `corrected`
 * holds Bob's key (unchanged when the CRC check failed), `disclosed` the
 * parity bits revealed and `crc_ok` the verification result.
 *
 * # Safety
 * `alice`, `bob` and `corrected` must hold `len` bytes; `disclosed` and
 * `crc_ok` must be writable.
 */
enum QkdfStatus qkdf_cascade_reconcile(const uint8_t *alice,
                                       const uint8_t *bob,
                                       size_t len,
                                       double qber,
                                       uint8_t *corrected,
                                       uint64_t *disclosed,
                                       bool *crc_ok);

/**
 * Runs both parties of a simulated session over a localhost link.
 * `pulses == 0` uses the preset's session length. An empty secret key is
 * not an error; check [`qkdf_session_secret_len`].
 *
 * # Safety
 * `p` must be a live preset and `out` writable.
 */
enum QkdfStatus qkdf_session_loopback(const struct QkdfPreset *p,
                                      uint64_t pulses,
                                      uint64_t seed,
                                      struct QkdfSession **out);

/**
 * # Safety
 * `s` must come from [`qkdf_session_loopback`]. NULL is a no-op.
 */
void qkdf_session_free(struct QkdfSession *s);

/**
 * Secret key length in bits, or 0 for a NULL session.
 *
 * # Safety
 * `s` must be a live session or NULL.
 */
uint64_t qkdf_session_secret_len(const struct QkdfSession *s);

/**
 * Copies a party's secret key (`party` 0 for Alice, 1 for Bob) into `buf`.
 *
 * # Safety
 * `s` must be a live session and `buf` must hold `cap` bytes.
 */
enum QkdfStatus qkdf_session_copy_key(const struct QkdfSession *s,
                                      uint32_t party,
                                      uint8_t *buf,
                                      size_t cap);

/**
 * Bob's session report as JSON, or NULL on failure. Free with
 * [`qkdf_string_free`].
 *
 * # Safety
 * `s` must be a live session or NULL.
 */
char *qkdf_session_report_json(const struct QkdfSession *s);

/**
 * Runs `trials` seeded polarization-compensation trials from a random
 * misalignment without drift. Writes the number that converged and the
 * median steps to convergence (-1 when the median run did not converge).
 *
 * # Safety
 * `p` must be a live preset; `converged` and `median` writable.
 */
enum QkdfStatus qkdf_polar_trials(const struct QkdfPreset *p,
                                  bool strong_pulses,
                                  uint64_t trials,
                                  uint64_t seed,
                                  uint64_t *converged,
                                  int64_t *median);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QKDF_H */
